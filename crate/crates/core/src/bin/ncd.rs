use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use ncd_core::config::PipelineConfig;
use ncd_core::error::{Error, Result};
use ncd_core::eval::EvalReport;
use ncd_core::fusion::{fuse_dataset, image_only, FusionOptions};
use ncd_core::losses::{self, Denominator};
use ncd_core::pipeline::{self, StageStatus};
use ncd_core::retrieval::{batch_retrieve, read_retrievals, write_retrievals};
use ncd_core::rng::SplitMix64;
use ncd_core::sskmeans::{fit, ClusterModel};
use ncd_core::store::{load_bundle, read_bundle_unchecked, validate_bundle, write_bundle};
use ncd_core::synth::{self, apply_split, generate_mixture};

#[derive(Parser)]
#[command(name = "ncd", version, about = "Retrieval-augmented novel class discovery on embedding bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file for single-artifact stages).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Captions retrieved per image.
    #[arg(long)]
    k: Option<usize>,
    /// Total number of clusters.
    #[arg(long)]
    clusters: Option<usize>,
    /// Cluster on image views only.
    #[arg(long)]
    no_text: bool,
    #[arg(long)]
    renormalize_joint: bool,
    #[arg(long)]
    freeze_known_centers: bool,
    /// exclude-positive | include-positive
    #[arg(long, value_parser = parse_denominator)]
    denominator: Option<Denominator>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image bundle (with split labels), caption corpus and truth files.
    Synth(Common),
    /// Top-k caption retrieval for every image.
    Retrieve {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the fused bundle from images and retrieved captions.
    Fuse {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        retrievals: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Semi-supervised k-means on a fused bundle; writes model.json.
    Cluster {
        #[arg(long)]
        fused: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Clustering accuracy (All/Old/New) of a model on its fused bundle.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// JSON list of known class ids; defaults to the labels present.
        #[arg(long)]
        old_classes: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline: synth, retrieve, fuse, cluster, eval.
    Run(Common),
    /// Run the pipeline once per k.
    Sweep {
        #[arg(long = "ks", value_delimiter = ',', required = true)]
        k_values: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic loss gradients with finite differences.
    LossCheck {
        #[arg(long, default_value_t = 24)]
        batches: usize,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Check a bundle directory; exit status 3 when invariants are violated.
    Validate { path: PathBuf },
}

fn parse_denominator(s: &str) -> std::result::Result<Denominator, String> {
    match s {
        "exclude-positive" => Ok(Denominator::ExcludePositive),
        "include-positive" => Ok(Denominator::IncludePositive),
        _ => Err("expected exclude-positive or include-positive".into()),
    }
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if self.clusters.is_some() {
            c.clusters = self.clusters;
        }
        c.no_text |= self.no_text;
        c.renormalize_joint |= self.renormalize_joint;
        c.freeze_known_centers |= self.freeze_known_centers;
        if let Some(v) = self.denominator {
            c.denominator = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        Ok(c)
    }

    fn out(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn required(p: Option<PathBuf>, from_config: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.or(from_config).ok_or_else(|| Error::Config(format!("missing --{what}")))
}

fn print_report(report: &EvalReport) {
    println!("{}", EvalReport::TSV_HEADER);
    println!("{}", report.tsv_line());
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    cfg.validate()?;
    let out = common.out("ncd-synth");
    let mixture = generate_mixture(&cfg.mixture_spec())?;
    let split = cfg.split_spec();
    write_bundle(&apply_split(&mixture.images, &split)?, &out.join("images"))?;
    write_bundle(&mixture.corpus, &out.join("corpus"))?;
    synth::write_truth(&mixture.truth, &out.join(synth::TRUTH_FILE))?;
    synth::write_old_classes(&split.known_classes, &out.join(synth::OLD_CLASSES_FILE))?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_retrieve(images: Option<PathBuf>, corpus: Option<PathBuf>, common: &Common) -> Result<()> {
    let cfg = common.config()?;
    cfg.validate()?;
    let images = load_bundle(&required(images, cfg.images.clone(), "images")?)?;
    let corpus = load_bundle(&required(corpus, cfg.corpus.clone(), "corpus")?)?;
    let results = batch_retrieve(&images, &corpus, cfg.k)?;
    let out = common.out("retrievals.jsonl");
    write_retrievals(&results, &out)?;
    info!("{} queries, k = {}", results.len(), cfg.k);
    println!("{}", out.display());
    Ok(())
}

fn cmd_fuse(
    images: Option<PathBuf>,
    corpus: Option<PathBuf>,
    retrievals: Option<PathBuf>,
    common: &Common,
) -> Result<()> {
    let cfg = common.config()?;
    let images = load_bundle(&required(images, cfg.images.clone(), "images")?)?;
    let fused = if cfg.no_text {
        image_only(&images)?
    } else {
        let corpus = load_bundle(&required(corpus, cfg.corpus.clone(), "corpus")?)?;
        let results = read_retrievals(&required(retrievals, None, "retrievals")?)?;
        let opts = FusionOptions {
            renormalize_joint: cfg.renormalize_joint,
        };
        fuse_dataset(&images, &results, &corpus, opts)?
    };
    let out = common.out("fused");
    write_bundle(&fused, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_cluster(fused: &Path, common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let fused = load_bundle(fused)?;
    if cfg.clusters.is_none() {
        return Err(Error::Config("missing --clusters".into()));
    }
    let cc = cfg.cluster_config();
    let model = fit(&fused, &cc)?;
    let out = common.out("model.json");
    model.write_json(&out)?;
    info!(
        "{} iterations, converged = {}, inertia = {:?}",
        model.iterations_run,
        model.converged,
        model.inertia_trace.last()
    );
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(fused: &Path, model: &Path, old: Option<PathBuf>, common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let fused = load_bundle(fused)?;
    let model = ClusterModel::read_json(model)?;
    let old = match old.or(cfg.old_classes) {
        Some(p) => synth::read_old_classes(&p)?,
        None => pipeline::known_labels(&fused),
    };
    let mut report = pipeline::evaluate_unlabelled(&fused, &model.assignments, &old)?;
    report.config = Some(serde_json::to_value(&model.config).expect("config serializes"));
    report.write(&common.out("eval"))?;
    print_report(&report);
    Ok(())
}

fn cmd_run(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let outcome = pipeline::run_pipeline(&cfg, &common.out("ncd-run"))?;
    for s in &outcome.manifest.stages {
        let status = match s.status {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
            StageStatus::Skipped => "skipped",
        };
        info!("{:<9}{status}", s.name);
    }
    print_report(&outcome.report);
    Ok(())
}

fn cmd_sweep(k_values: &[usize], common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let rows = pipeline::topk_sweep(&cfg, k_values, &common.out("ncd-sweep"))?;
    print!("{}", pipeline::sweep_csv(&rows));
    Ok(())
}

/// Returns whether every batch passed.
fn cmd_loss_check(batches: usize, rows: usize, dim: usize, step: f64, threshold: f64, common: &Common) -> Result<bool> {
    let cfg = common.config()?;
    let lambdas = match common.lambda {
        Some(l) => vec![l],
        None => vec![0.0, 0.25, 1.0],
    };
    let taus = match common.tau {
        Some(t) => vec![t],
        None => vec![0.07, 1.0],
    };
    let grid: Vec<(f64, f64)> = lambdas.iter().flat_map(|&l| taus.iter().map(move |&t| (l, t))).collect();
    let mut rng = SplitMix64::new(cfg.seed);
    let mut all_ok = true;
    println!("batch\tlambda\ttau\tmax_rel_err\tmax_abs_err\tresult");
    for b in 0..batches {
        let (lambda, tau) = grid[b % grid.len()];
        let batch = losses::random_batch(&mut rng, rows, dim, tau, lambda)?.with_denominator(cfg.denominator);
        let check = losses::gradient_check(&batch, step)?;
        let ok = check.max_relative_error < threshold;
        all_ok &= ok;
        println!(
            "{b}\t{lambda}\t{tau}\t{:.3e}\t{:.3e}\t{}",
            check.max_relative_error,
            check.max_absolute_error,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!("{}", if all_ok { "all batches pass" } else { "gradient check failed" });
    Ok(all_ok)
}

/// Returns whether the bundle is valid.
fn cmd_validate(path: &Path) -> Result<bool> {
    let bundle = read_bundle_unchecked(path)?;
    let violations = validate_bundle(&bundle);
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} rows, dim {}", bundle.count(), bundle.dim());
    }
    Ok(violations.is_empty())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ok = match cli.command {
        Command::Synth(c) => cmd_synth(&c).map(|_| true),
        Command::Retrieve { images, corpus, common } => cmd_retrieve(images, corpus, &common).map(|_| true),
        Command::Fuse {
            images,
            corpus,
            retrievals,
            common,
        } => cmd_fuse(images, corpus, retrievals, &common).map(|_| true),
        Command::Cluster { fused, common } => cmd_cluster(&fused, &common).map(|_| true),
        Command::Eval {
            fused,
            model,
            old_classes,
            common,
        } => cmd_eval(&fused, &model, old_classes, &common).map(|_| true),
        Command::Run(c) => cmd_run(&c).map(|_| true),
        Command::Sweep { k_values, common } => cmd_sweep(&k_values, &common).map(|_| true),
        Command::LossCheck {
            batches,
            rows,
            dim,
            step,
            threshold,
            common,
        } => cmd_loss_check(batches, rows, dim, step, threshold, &common),
        Command::Validate { path } => cmd_validate(&path),
    }?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(&format!("\n  caused by: {text}"));
                }
                source = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
