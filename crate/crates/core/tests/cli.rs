use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ncd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncd"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--seed", "7"];

#[test]
fn run_then_rerun_is_cached_and_identical() {
    let t = tempfile::tempdir().unwrap();
    let args = [&["run", "--out", "r"][..], SMALL].concat();
    let first = ncd(&args, t.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let stdout = String::from_utf8_lossy(&first.stdout).into_owned();
    assert!(stdout.starts_with("acc_all\tacc_old\tacc_new"));
    let r1 = fs::read(t.path().join("r/eval/report.json")).unwrap();

    let second = ncd(&args, t.path());
    assert_eq!(code(&second), 0);
    assert_eq!(String::from_utf8_lossy(&second.stdout), stdout);
    assert_eq!(fs::read(t.path().join("r/eval/report.json")).unwrap(), r1);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("r/run_manifest.json")).unwrap()).unwrap();
    for stage in manifest["stages"].as_array().unwrap() {
        assert_eq!(stage["status"], "cached", "{stage}");
        assert_eq!(stage["output_hash"].as_str().unwrap().len(), 64);
    }
    let rep = report(&t.path().join("r/eval"));
    assert_eq!(rep["config"]["seed"], 7);
    assert_eq!(rep["config"]["k"], 3);
    assert!(rep["acc_new"].is_number() && rep["acc_old"].is_number());
}

#[test]
fn flags_override_config_file() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.toml"), "seed = 3\nk = 5\nsamples_per_class = 30\n").unwrap();
    let o = ncd(&["run", "--config", "c.toml", "--k", "2", "--no-text", "--out", "r"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = report(&t.path().join("r/eval"));
    assert_eq!(rep["config"]["k"], 2);
    assert_eq!(rep["config"]["seed"], 3);
    assert_eq!(rep["config"]["no_text"], true);
    assert_eq!(rep["n_all"], 10 * 30 - 5 * 15);
    assert!(!t.path().join("r/retrieve/retrievals.jsonl").exists());
}

#[test]
fn stage_commands_reproduce_full_run() {
    let t = tempfile::tempdir().unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--out", "s"],
        vec!["retrieve", "--images", "s/images", "--corpus", "s/corpus", "--out", "r.jsonl"],
        vec!["fuse", "--images", "s/images", "--corpus", "s/corpus", "--retrievals", "r.jsonl", "--out", "f"],
        vec!["cluster", "--fused", "f", "--clusters", "10", "--out", "m.json"],
        vec!["eval", "--fused", "f", "--model", "m.json", "--old-classes", "s/old_classes.json", "--out", "e"],
        vec!["run", "--out", "full"],
    ];
    for step in steps {
        let o = ncd(&[&step[..], SMALL].concat(), t.path());
        assert_eq!(code(&o), 0, "{step:?}: {}", stderr(&o));
    }
    let staged = report(&t.path().join("e"));
    let full = report(&t.path().join("full/eval"));
    for key in ["acc_all", "acc_old", "acc_new", "correct_all", "matching"] {
        assert_eq!(staged[key], full[key], "{key}");
    }
    assert_eq!(
        fs::read(t.path().join("f/embeddings.bin")).unwrap(),
        fs::read(t.path().join("full/fuse/fused/embeddings.bin")).unwrap()
    );
}

#[test]
fn missing_input_bundle_exits_2_naming_stage() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.toml"), "synth = false\nimages = \"nope\"\ncorpus = \"nope2\"\nclusters = 4\n").unwrap();
    let o = ncd(&["run", "--config", "c.toml", "--out", "r"], t.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage inputs failed"), "{}", stderr(&o));

    let o = ncd(&["retrieve", "--images", "nope", "--corpus", "nope"], t.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn bad_config_exits_2() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.toml"), "colour = 1\n").unwrap();
    assert_eq!(code(&ncd(&["run", "--config", "c.toml"], t.path())), 2);
    assert_eq!(code(&ncd(&["run", "--config", "absent.toml"], t.path())), 2);
    assert_eq!(code(&ncd(&["run", "--k", "0", "--out", "r"], t.path())), 2);
    assert_eq!(code(&ncd(&["run", "--denominator", "sideways"], t.path())), 2);
}

#[test]
fn validate_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&ncd(&["synth", "--out", "s", "--seed", "1"], t.path())), 0);
    let ok = ncd(&["validate", "s/images"], t.path());
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("ok: 1000 rows"));

    // Break unit norm on row 0 (manifest says normalized).
    let bin = t.path().join("s/images/embeddings.bin");
    let mut bytes = fs::read(&bin).unwrap();
    bytes[..4].copy_from_slice(&5.0f32.to_le_bytes());
    fs::write(&bin, bytes).unwrap();
    let bad = ncd(&["validate", "s/images"], t.path());
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("row 0"));

    assert_eq!(code(&ncd(&["validate", "missing"], t.path())), 2);
}

#[test]
fn loss_check_table_and_failure_code() {
    let t = tempfile::tempdir().unwrap();
    let o = ncd(&["loss-check"], t.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(out.lines().filter(|l| l.ends_with("\tpass")).count(), 24);
    assert!(out.contains("all batches pass"));
    let o = ncd(&["loss-check", "--denominator", "include-positive", "--batches", "4"], t.path());
    assert_eq!(code(&o), 0);
    let o = ncd(&["loss-check", "--threshold", "0", "--batches", "2"], t.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn sweep_writes_csv_and_dedups() {
    let t = tempfile::tempdir().unwrap();
    let o = ncd(&["sweep", "--ks", "3,1,3", "--out", "sw", "--seed", "2"], t.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(t.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,acc_all,acc_old,acc_new,status");
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("3,"));
    assert_eq!(lines.len(), 3);
    assert!(fs::read_to_string(t.path().join("sw/sweep.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn locked_output_directory_exits_1() {
    let t = tempfile::tempdir().unwrap();
    fs::create_dir(t.path().join("r")).unwrap();
    fs::write(t.path().join("r/.lock"), "123\n").unwrap();
    let o = ncd(&["run", "--out", "r"], t.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}
