//! `anomseg`: dataset generation, training, inference, evaluation and
//! ablation runs for the anomaly segmentation pipeline.

use std::path::PathBuf;

use anomseg::data::Split;
use anomseg::pipeline::{emit_report, InferRequest, NetKind, Pipeline, RunConfig, Source, Variant};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "anomseg", version, about = "Pixel-wise anomaly segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for all artifacts.
    #[arg(long, global = true, env = "ANOMSEG_OUTPUT")]
    output: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `toy` or `precomputed:<dir>`.
    #[arg(long, global = true)]
    backbone: Option<String>,
    /// Persist per-stage tensors during inference.
    #[arg(long, global = true)]
    keep_intermediates: bool,
    /// Configuration override, repeatable: `--set train.epochs=2`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    AnomalyTest,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::AnomalyTest => Split::AnomalyTest,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NetArg {
    Full,
    NoUncertainty,
    NoDatagen,
}

impl From<NetArg> for NetKind {
    fn from(n: NetArg) -> NetKind {
        match n {
            NetArg::Full => NetKind::Full,
            NetArg::NoUncertainty => NetKind::NoUncertainty,
            NetArg::NoDatagen => NetKind::NoDatagen,
        }
    }
}

#[derive(Args, Debug)]
struct ImagesArg {
    /// Dataset split to process.
    #[arg(long, value_enum, default_value = "anomaly-test", conflicts_with = "image")]
    split: SplitArg,
    /// Image files to process instead of a split.
    #[arg(long)]
    image: Vec<PathBuf>,
    /// Process at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    /// Output directory (default: below the run's output root).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ImagesArg {
    fn source(&self) -> Source {
        if self.image.is_empty() {
            Source::Split(self.split.into())
        } else {
            Source::Images(self.image.clone())
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shapes dataset.
    MakeDataset,
    /// Train the toy segmentation and synthesis backbones.
    TrainBackbones,
    /// Generate labelled training examples for the dissimilarity network.
    GenerateTrainingData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Share of swap examples; defaults to `datagen.mix`.
        #[arg(long)]
        mix: Option<f64>,
    },
    /// Train dissimilarity networks.
    TrainDissimilarity {
        #[arg(long, value_enum, default_value = "full")]
        net: Vec<NetArg>,
    },
    /// Export entropy, distance and perceptual-difference maps.
    Uncertainty {
        #[command(flatten)]
        images: ImagesArg,
    },
    /// Run all six stages and write anomaly score maps.
    Infer {
        #[command(flatten)]
        images: ImagesArg,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Grid-search ensemble weights on the validation split.
    EnsembleSearch,
    /// Evaluate trained configurations on the anomaly-test split.
    Evaluate {
        /// Comma-separated configuration names.
        #[arg(long, default_value = "full,no-ensemble")]
        variants: String,
    },
    /// Train and evaluate the ablation configurations over all seeds.
    Ablate {
        #[arg(long, default_value = "full,no-ensemble,no-uncertainty,no-datagen-no-uncertainty")]
        variants: String,
    },
    /// Collect saved evaluations into report files.
    Report {
        /// Output directory (default: `<output>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render heat overlays for this many anomaly-test images.
        #[arg(long, default_value_t = 0)]
        overlays: usize,
        #[arg(long, default_value = "full")]
        variant: String,
    },
}

fn variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(|s| Variant::parse(s.trim()).map_err(Into::into))
        .collect()
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for kv in &g.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("`--set {kv}` is not KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(o) = &g.output {
        overrides.push(("output".into(), serde_json::to_string(o)?));
    }
    if let Some(s) = g.seed {
        overrides.push(("seeds".into(), format!("[{s}]")));
    }
    if let Some(b) = &g.backbone {
        overrides.push(("backbone".into(), b.clone()));
    }
    Ok(RunConfig::load(g.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    let p = Pipeline::new(cfg)?;
    let seeds = p.cfg.seeds.clone();
    match cli.command {
        Command::MakeDataset => {
            let index = p.make_dataset()?;
            println!("{} images written to {}", index.records.len(), index.root.display());
        }
        Command::TrainBackbones => {
            let index = p.dataset()?;
            let b = p.train_backbones(&index)?;
            if let Some(r) = b.report() {
                println!("{}", serde_json::to_string_pretty(r)?);
            }
        }
        Command::GenerateTrainingData { split, mix } => {
            let index = p.dataset()?;
            let b = p.backbones(Some(&index))?;
            let fx = p.features()?;
            let stages = p.stages(&b, &fx)?;
            let mix = mix.unwrap_or(p.cfg.datagen.mix);
            for seed in seeds {
                let samples = p.generated(&index, &stages, split.into(), mix, seed)?;
                println!(
                    "seed {seed}: {} examples in {}",
                    samples.len(),
                    p.datagen_dir(split.into(), mix, seed).display()
                );
            }
        }
        Command::TrainDissimilarity { net } => {
            let index = p.dataset()?;
            let b = p.backbones(Some(&index))?;
            let fx = p.features()?;
            let stages = p.stages(&b, &fx)?;
            for seed in seeds {
                for &n in &net {
                    let kind: NetKind = n.into();
                    let t = p.train_dissimilarity(&index, &stages, seed, kind)?;
                    println!(
                        "seed {seed} {}: best epoch {} of {}, {}",
                        kind.name(),
                        t.log.best_epoch,
                        t.log.epochs.len(),
                        p.net_dir(seed, kind).display()
                    );
                }
            }
        }
        Command::Uncertainty { images } => {
            let out = images.out.clone().unwrap_or_else(|| p.root().join("uncertainty"));
            let stems = p.export_uncertainty(&images.source(), &out, images.limit)?;
            println!("{} images written to {}", stems.len(), out.display());
        }
        Command::Infer { images, variant } => {
            let variant = Variant::parse(&variant)?;
            for seed in seeds {
                let out_dir = images
                    .out
                    .clone()
                    .unwrap_or_else(|| p.seed_dir(seed).join("infer").join(variant.name()));
                let output = p.run_pipeline(&InferRequest {
                    seed,
                    variant,
                    source: images.source(),
                    out_dir: out_dir.clone(),
                    keep_intermediates: cli.global.keep_intermediates,
                    limit: images.limit,
                })?;
                println!("seed {seed}: {} score maps in {}", output.scores.len(), out_dir.display());
            }
        }
        Command::EnsembleSearch => {
            let index = p.dataset()?;
            let b = p.backbones(Some(&index))?;
            let fx = p.features()?;
            let stages = p.stages(&b, &fx)?;
            for seed in seeds {
                let net = p.load_dissimilarity(seed, NetKind::Full)?;
                let r = p.ensemble_search(&index, &stages, seed, &net)?;
                println!(
                    "{}",
                    serde_json::to_string_pretty(&serde_json::json!({
                        "seed": seed,
                        "weights": r.search.best.weights,
                        "ap": r.search.best.ap,
                        "fpr95": r.search.best.fpr95,
                        "learned": r.learned.weights,
                        "grid_points": r.search.log.len(),
                    }))?
                );
            }
        }
        Command::Evaluate { variants: list } => {
            let vs = variants(&list)?;
            let index = p.dataset()?;
            let b = p.backbones(None)?;
            let fx = p.features()?;
            let stages = p.stages(&b, &fx)?;
            let set = p.eval_set(&index, &stages)?;
            let mut evals = Vec::new();
            for seed in seeds {
                evals.extend(p.evaluate_seed(&index, &stages, &set, seed, &vs, false)?.0.into_iter().map(|(_, e)| e));
            }
            let files = emit_report(&evals, &p.root().join("report"))?;
            for e in &evals {
                println!("seed {} {}: AP {:.4} FPR95 {:.4} AUROC {:.4}", e.seed, e.name, e.result.ap, e.result.fpr95, e.result.auroc);
            }
            println!("report: {}", files[0].parent().unwrap_or(p.root()).display());
        }
        Command::Ablate { variants: list } => {
            let report = p.run_ablation(&variants(&list)?)?;
            print!("{}", report.table());
        }
        Command::Report { out, overlays, variant } => {
            let evals = p.collect_evaluations()?;
            if evals.is_empty() {
                bail!("no saved evaluations under {}; run `evaluate` or `ablate` first", p.root().display());
            }
            let dir = out.unwrap_or_else(|| p.root().join("report"));
            let files = emit_report(&evals, &dir)?;
            if overlays > 0 {
                let v = Variant::parse(&variant)?;
                let written = p.overlays(seeds[0], v, overlays, &dir.join("overlays"))?;
                println!("{} overlays", written.len());
            }
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
