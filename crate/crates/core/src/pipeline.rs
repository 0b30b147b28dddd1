//! Stage-wise pipeline: synth -> retrieve -> fuse -> cluster -> eval.
//!
//! Every stage writes into its own directory under the run root. A stage's
//! cache key hashes its name, the config values it reads, and the content hash
//! of its inputs; when `stage.key` matches, the stage is reused and reported as
//! `cached`. A stage that fails leaves a `.partial` marker in its directory.
//!
//! ```text
//! <out>/synth/{images,corpus}/   bundles, plus truth.json and old_classes.json
//! <out>/retrieve/retrievals.jsonl
//! <out>/fuse/fused/              bundle
//! <out>/cluster/model.json
//! <out>/eval/report.{json,tsv}
//! <out>/run_manifest.json
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{subset_report, EvalReport};
use crate::fusion::{fuse_dataset, image_only, FusionOptions};
use crate::retrieval::{batch_retrieve, read_retrievals, write_retrievals};
use crate::sskmeans::{fit, ClusterModel};
use crate::store::{load_bundle, write_bundle, EmbeddingBundle};
use crate::synth::{self, apply_split, generate_mixture, OLD_CLASSES_FILE, TRUTH_FILE};

pub const MANIFEST_FILE: &str = "run_manifest.json";
const KEY_FILE: &str = "stage.key";
const PARTIAL_FILE: &str = ".partial";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: &'static str,
    pub status: StageStatus,
    pub key: String,
    /// SHA-256 over the stage's output files.
    pub output_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub manifest: RunManifest,
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sha_hex(h: Sha256) -> String {
    hex::encode(h.finalize())
}

/// SHA-256 over every file under `path` (sorted relative paths and contents),
/// skipping stage bookkeeping files.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update(&bytes);
        return Ok(sha_hex(h));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    for rel in files {
        let full = path.join(&rel);
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(sha_hex(h))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        let name = entry.file_name();
        if name == KEY_FILE || name == PARTIAL_FILE || name == LOCK_FILE {
            continue;
        }
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn stage_key(name: &str, params: &serde_json::Value, inputs: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0]);
    h.update(params.to_string().as_bytes());
    for i in inputs {
        h.update([0]);
        h.update(i.as_bytes());
    }
    sha_hex(h)
}

/// Runs `compute` in `dir` unless a previous run with the same key completed there.
fn run_stage(
    name: &'static str,
    dir: &Path,
    key: String,
    compute: impl FnOnce(&Path) -> Result<()>,
) -> Result<StageRecord> {
    let key_path = dir.join(KEY_FILE);
    let partial = dir.join(PARTIAL_FILE);
    let cached = !partial.exists() && fs::read_to_string(&key_path).is_ok_and(|k| k.trim() == key);
    let status = if cached {
        info!("{name}: cached");
        StageStatus::Cached
    } else {
        info!("{name}: running");
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e).in_stage(name))?;
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).in_stage(name))?;
        fs::write(&partial, b"").map_err(|e| Error::io(&partial, e).in_stage(name))?;
        compute(dir).map_err(|e| e.in_stage(name))?;
        fs::write(&key_path, format!("{key}\n")).map_err(|e| Error::io(&key_path, e).in_stage(name))?;
        fs::remove_file(&partial).map_err(|e| Error::io(&partial, e).in_stage(name))?;
        StageStatus::Ran
    };
    let output_hash = content_hash(dir).map_err(|e| e.in_stage(name))?;
    Ok(StageRecord {
        name,
        status,
        key,
        output_hash,
    })
}

fn skipped(name: &'static str) -> StageRecord {
    StageRecord {
        name,
        status: StageStatus::Skipped,
        key: String::new(),
        output_hash: String::new(),
    }
}

/// Where the inputs of the retrieve stage live.
struct Inputs {
    images: PathBuf,
    corpus: Option<PathBuf>,
    old_classes: Option<PathBuf>,
    record: StageRecord,
}

fn synth_stage(cfg: &PipelineConfig, dir: &Path) -> Result<Inputs> {
    let params = json!({ "mixture": cfg.mixture_spec(), "split": cfg.split_spec() });
    let key = stage_key("synth", &params, &[]);
    let record = run_stage("synth", dir, key, |dir| {
        let mixture = generate_mixture(&cfg.mixture_spec())?;
        let split = cfg.split_spec();
        let images = apply_split(&mixture.images, &split)?;
        write_bundle(&images, &dir.join("images"))?;
        write_bundle(&mixture.corpus, &dir.join("corpus"))?;
        synth::write_truth(&mixture.truth, &dir.join(TRUTH_FILE))?;
        synth::write_old_classes(&split.known_classes, &dir.join(OLD_CLASSES_FILE))
    })?;
    Ok(Inputs {
        images: dir.join("images"),
        corpus: Some(dir.join("corpus")),
        old_classes: Some(dir.join(OLD_CLASSES_FILE)),
        record,
    })
}

fn external_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let images = cfg.images.clone().expect("validated");
    let hash = |p: &Path| content_hash(p).map_err(|e| e.in_stage("inputs"));
    let mut h = hash(&images)?;
    if let Some(c) = &cfg.corpus {
        h.push_str(&hash(c)?);
    }
    Ok(Inputs {
        images,
        corpus: cfg.corpus.clone(),
        old_classes: cfg.old_classes.clone(),
        record: StageRecord {
            name: "synth",
            status: StageStatus::Skipped,
            key: String::new(),
            output_hash: h,
        },
    })
}

/// Runs retrieve, fuse, cluster and eval against prepared inputs under `root`.
fn run_downstream(cfg: &PipelineConfig, root: &Path, inputs: &Inputs) -> Result<(EvalReport, Vec<StageRecord>)> {
    let mut stages = Vec::new();
    let retrievals_path = root.join("retrieve").join("retrievals.jsonl");

    let retrieve = if cfg.no_text {
        skipped("retrieve")
    } else {
        let key = stage_key("retrieve", &json!({ "k": cfg.k }), &[&inputs.record.output_hash]);
        let corpus_path = inputs.corpus.clone().expect("validated");
        run_stage("retrieve", &root.join("retrieve"), key, |_| {
            let images = load_bundle(&inputs.images)?;
            let corpus = load_bundle(&corpus_path)?;
            let results = batch_retrieve(&images, &corpus, cfg.k)?;
            write_retrievals(&results, &retrievals_path)
        })?
    };

    let fused_path = root.join("fuse").join("fused");
    let fuse_params = json!({ "no_text": cfg.no_text, "renormalize_joint": cfg.renormalize_joint });
    let fuse_key = stage_key(
        "fuse",
        &fuse_params,
        &[&inputs.record.output_hash, &retrieve.output_hash],
    );
    let fuse = run_stage("fuse", &root.join("fuse"), fuse_key, |_| {
        let images = load_bundle(&inputs.images)?;
        let fused = if cfg.no_text {
            image_only(&images)?
        } else {
            let corpus = load_bundle(inputs.corpus.as_deref().expect("validated"))?;
            let results = read_retrievals(&retrievals_path)?;
            fuse_dataset(
                &images,
                &results,
                &corpus,
                FusionOptions {
                    renormalize_joint: cfg.renormalize_joint,
                },
            )?
        };
        write_bundle(&fused, &fused_path)
    })?;

    let model_path = root.join("cluster").join("model.json");
    let cluster_cfg = cfg.cluster_config();
    let cluster_key = stage_key(
        "cluster",
        &serde_json::to_value(&cluster_cfg).expect("config serializes"),
        &[&fuse.output_hash],
    );
    let cluster = run_stage("cluster", &root.join("cluster"), cluster_key, |_| {
        let fused = load_bundle(&fused_path)?;
        fit(&fused, &cluster_cfg)?.write_json(&model_path)
    })?;

    let eval_dir = root.join("eval");
    let config_json = cfg.to_json();
    let old_hash = match &inputs.old_classes {
        Some(p) => content_hash(p).map_err(|e| e.in_stage("eval"))?,
        None => String::new(),
    };
    let eval_key = stage_key(
        "eval",
        &config_json,
        &[&fuse.output_hash, &cluster.output_hash, &old_hash],
    );
    let eval = run_stage("eval", &eval_dir, eval_key, |dir| {
        let fused = load_bundle(&fused_path)?;
        let model = ClusterModel::read_json(&model_path)?;
        let old = match &inputs.old_classes {
            Some(p) => synth::read_old_classes(p)?,
            None => known_labels(&fused),
        };
        let mut report = evaluate_unlabelled(&fused, &model.assignments, &old)?;
        report.config = Some(config_json.clone());
        report.write(dir)
    })?;

    let report = EvalReport::read(&eval_dir.join("report.json")).map_err(|e| e.in_stage("eval"))?;
    stages.extend([retrieve, fuse, cluster, eval]);
    Ok((report, stages))
}

/// Labels present in a bundle.
pub fn known_labels(bundle: &EmbeddingBundle) -> BTreeSet<String> {
    bundle.records().iter().filter_map(|r| r.label.clone()).collect()
}

/// Scores the unlabelled rows of `bundle` (All/Old/New) given per-row cluster assignments.
pub fn evaluate_unlabelled(
    bundle: &EmbeddingBundle,
    assignments: &[usize],
    old_classes: &BTreeSet<String>,
) -> Result<EvalReport> {
    if assignments.len() != bundle.count() {
        return Err(Error::LengthMismatch {
            left: bundle.count(),
            right: assignments.len(),
        });
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for r in bundle.records().iter().filter(|r| !r.is_labelled()) {
        let t = r
            .class_truth
            .clone()
            .ok_or_else(|| Error::Config(format!("unlabelled sample {:?} has no class_truth", r.id)))?;
        pred.push(assignments[r.row]);
        truth.push(t);
    }
    subset_report(&pred, &truth, old_classes)
}

fn write_manifest(root: &Path, manifest: &RunManifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Full pipeline into `out`. Identical config and inputs give identical outputs.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let inputs = if cfg.synth {
        synth_stage(cfg, &out.join("synth"))?
    } else {
        external_inputs(cfg)?
    };
    let (report, downstream) = run_downstream(cfg, out, &inputs)?;
    let mut stages = vec![inputs.record.clone()];
    stages.extend(downstream);
    let manifest = RunManifest {
        config: cfg.to_json(),
        stages,
    };
    write_manifest(out, &manifest)?;
    Ok(RunOutcome { report, manifest })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Runs the pipeline once per distinct `k` (ascending) on shared inputs. Failed
/// runs are recorded and the sweep continues. Writes `sweep.csv`, `sweep_plot.json`
/// and `sweep.svg` into `out`.
pub fn topk_sweep(cfg: &PipelineConfig, k_values: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Config("no k values to sweep".into()));
    }
    let mut ks: Vec<usize> = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() != k_values.len() {
        warn!("duplicate k values removed; sweeping {ks:?}");
    }
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let inputs = if cfg.synth {
        synth_stage(cfg, &out.join("synth"))?
    } else {
        external_inputs(cfg)?
    };

    let mut rows = Vec::new();
    for &k in &ks {
        let run_cfg = PipelineConfig { k, ..cfg.clone() };
        let root = out.join(format!("k{k}"));
        let row = match run_cfg.validate().and_then(|_| run_downstream(&run_cfg, &root, &inputs)) {
            Ok((report, stages)) => {
                let mut all = vec![inputs.record.clone()];
                all.extend(stages);
                write_manifest(
                    &root,
                    &RunManifest {
                        config: run_cfg.to_json(),
                        stages: all,
                    },
                )?;
                SweepRow {
                    k,
                    report: Some(report),
                    error: None,
                }
            }
            Err(e) => {
                warn!("k={k} failed: {e}");
                SweepRow {
                    k,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    write_sweep_outputs(&rows, out)?;
    Ok(rows)
}

fn fmt_acc(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.4}"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k,acc_all,acc_old,acc_new,status\n");
    for r in rows {
        let (all, old, new) = match &r.report {
            Some(rep) => (Some(rep.acc_all), rep.acc_old, rep.acc_new),
            None => (None, None, None),
        };
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        s.push_str(&format!("{},{},{},{},{}\n", r.k, fmt_acc(all), fmt_acc(old), fmt_acc(new), status));
    }
    s
}

fn write_sweep_outputs(rows: &[SweepRow], out: &Path) -> Result<()> {
    let csv = out.join("sweep.csv");
    fs::write(&csv, sweep_csv(rows)).map_err(|e| Error::io(&csv, e))?;

    let series = |f: fn(&EvalReport) -> Option<f64>| -> Vec<(usize, f64)> {
        rows.iter()
            .filter_map(|r| r.report.as_ref().and_then(f).map(|v| (r.k, v)))
            .collect()
    };
    let all = series(|r| Some(r.acc_all));
    let old = series(|r| r.acc_old);
    let new = series(|r| r.acc_new);

    let plot = out.join("sweep_plot.json");
    let data = json!({ "x": "k", "series": { "All": all, "Old": old, "New": new } });
    let text = serde_json::to_string_pretty(&data).expect("plot serializes") + "\n";
    fs::write(&plot, text).map_err(|e| Error::io(&plot, e))?;

    let svg = out.join("sweep.svg");
    fs::write(&svg, render_svg(&[("All", &all), ("Old", &old), ("New", &new)])).map_err(|e| Error::io(&svg, e))
}

/// Minimal line chart of accuracy against k (log-spaced x when k spans a decade).
fn render_svg(series: &[(&str, &Vec<(usize, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let ks: Vec<usize> = series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)).collect();
    let (kmin, kmax) = (
        ks.iter().copied().min().unwrap_or(1) as f64,
        ks.iter().copied().max().unwrap_or(1) as f64,
    );
    let log = kmax / kmin.max(1.0) >= 10.0;
    let xpos = |k: usize| -> f64 {
        let (a, b, v) = if log {
            (kmin.max(1.0).ln(), kmax.ln(), (k as f64).max(1.0).ln())
        } else {
            (kmin, kmax, k as f64)
        };
        if b > a {
            PAD + (v - a) / (b - a) * (W - 2.0 * PAD)
        } else {
            W / 2.0
        }
    };
    let ypos = |acc: f64| H - PAD - acc * (H - 2.0 * PAD);
    let colors = ["#1f77b4", "#2ca02c", "#d62728"];

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = H - PAD,
        x2 = W - PAD
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{tick:.2}</text>\n",
            PAD - 4.0,
            ypos(tick) + 4.0
        ));
    }
    let mut uniq = ks.clone();
    uniq.sort_unstable();
    uniq.dedup();
    for k in uniq {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{k}</text>\n",
            xpos(k),
            H - PAD + 16.0
        ));
    }
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">top-k</text>\n", W / 2.0, H - 8.0));
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(k, v)| format!("{:.1},{:.1}", xpos(k), ypos(v))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            W - PAD + 4.0,
            PAD + 14.0 * i as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            num_classes: 4,
            known_classes: 2,
            samples_per_class: 20,
            d_img: 8,
            d_txt: 8,
            captions_per_class: 3,
            separation: 6.0,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn rerun_uses_cache() {
        let dir = tempfile::tempdir().unwrap();
        let first = run_pipeline(&small(), dir.path()).unwrap();
        assert!(first.manifest.stages.iter().all(|s| s.status == StageStatus::Ran));
        let second = run_pipeline(&small(), dir.path()).unwrap();
        assert!(second.manifest.stages.iter().all(|s| s.status == StageStatus::Cached));
        assert_eq!(first.report, second.report);

        let changed = PipelineConfig { k: 2, ..small() };
        let third = run_pipeline(&changed, dir.path()).unwrap();
        let status: Vec<_> = third.manifest.stages.iter().map(|s| s.status).collect();
        assert_eq!(status[0], StageStatus::Cached);
        assert_eq!(status[1], StageStatus::Ran);
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn lock_blocks_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let _held = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(run_pipeline(&small(), dir.path()), Err(Error::Locked(_))));
    }

    #[test]
    fn failing_stage_is_named_and_marked_partial() {
        let dir = tempfile::tempdir().unwrap();
        // More clusters than unlabelled rows can seed.
        let cfg = PipelineConfig {
            clusters: Some(500),
            ..small()
        };
        let err = run_pipeline(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("stage cluster failed"), "{err}");
        assert!(dir.path().join("cluster").join(PARTIAL_FILE).exists());
    }

    #[test]
    fn external_inputs_missing_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            synth: false,
            images: Some(dir.path().join("missing")),
            corpus: Some(dir.path().join("missing2")),
            clusters: Some(3),
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&cfg, &dir.path().join("out")).unwrap_err();
        assert!(err.to_string().contains("stage inputs"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sweep_dedups_and_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = topk_sweep(&small(), &[2, 1, 2], dir.path()).unwrap();
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2]);
        let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("sweep.svg").exists());
        assert!(dir.path().join("sweep_plot.json").exists());
    }

    #[test]
    fn single_k_sweep_matches_plain_run() {
        let sweep_dir = tempfile::tempdir().unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let rows = topk_sweep(&PipelineConfig { k: 9, ..small() }, &[1], sweep_dir.path()).unwrap();
        let plain = run_pipeline(&PipelineConfig { k: 1, ..small() }, run_dir.path()).unwrap();
        assert_eq!(rows[0].report.as_ref(), Some(&plain.report));
    }
}
