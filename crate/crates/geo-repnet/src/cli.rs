//! Command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use geo_repnet_core::gradcheck::{check_config, GradCheckConfig};
use geo_repnet_core::metrics::MetricsReport;
use geo_repnet_core::synth::{scaled_counts, SampleRecord, REFERENCE_TRAIN_COUNTS, REFERENCE_VAL_COUNTS};
use geo_repnet_core::train::{evaluate, train, EpochRecord};
use geo_repnet_core::{DType, GeoRepNet};
use serde::Serialize;

use crate::config::RunConfigFile;
use crate::error::{Error, Result};
use crate::{bench, checkpoint, dataset, json};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "GEO_REPNET_OUT";
const DEFAULT_OUT: &str = "geo-repnet-out";
const EVAL_BATCH: usize = 32;

#[derive(Debug, Parser)]
#[command(name = "geo-repnet", version, about = "Depth-guided RepVGG phase classifier on synthetic RGB-D data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and val splits of the synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint, history and validation metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Fuse every block of a checkpoint into a single convolution.
    Reparam(ReparamArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Time multi-branch against fused inference.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplier on the reference train counts.
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    /// Multiplier on the reference validation counts.
    #[arg(long, default_value_t = 1.0)]
    pub val_scale: f64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults to the stock desk configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `train/` and optionally `val/`; generated in memory when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub no_dgpg: bool,
    #[arg(long)]
    pub no_gsa: bool,
    #[arg(long)]
    pub no_ema: bool,
    /// EMA grouping factor.
    #[arg(long, value_parser = clap::builder::TypedValueParser::map(clap::builder::PossibleValuesParser::new(["4", "8", "16", "32"]), |s: String| s.parse::<usize>().expect("listed values parse")))]
    pub factor: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory with a manifest; the seeded val split is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReparamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries sampled per parameter tensor.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Run configuration whose model is checked; the micro model when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fused checkpoint; fused in memory when omitted.
    #[arg(long)]
    pub fused: Option<PathBuf>,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Reparam(a) => reparam_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn output_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        root.join(command)
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    use std::io::Write;
    let text = json::to_canonical(value)?;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(Error::io("<stdout>", e)),
        _ => {}
    }
    if let Some(p) = path {
        json::write_canonical(value, p)?;
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let out = output_dir(a.out, "data");
    let train_counts = scaled_counts(&REFERENCE_TRAIN_COUNTS, a.scale)?;
    let val_counts = scaled_counts(&REFERENCE_VAL_COUNTS, a.val_scale)?;
    let train = dataset::generate_dataset(&train_counts, a.seed, "train", a.size, out.join("train"))?;
    let val = dataset::generate_dataset(&val_counts, a.seed, "val", a.size, out.join("val"))?;
    #[derive(Serialize)]
    struct Summary {
        out: String,
        train: usize,
        val: usize,
    }
    emit(
        &Summary {
            out: out.display().to_string(),
            train: train.total(),
            val: val.total(),
        },
        None,
    )
}

fn square_size(cfg: &RunConfigFile) -> Result<usize> {
    let (h, w) = (cfg.model.input_height, cfg.model.input_width);
    if h != w {
        return Err(Error::Usage(format!("synthetic images are square, model expects {h}×{w}")));
    }
    Ok(h)
}

fn check_size(data: &[SampleRecord], cfg: &RunConfigFile) -> Result<()> {
    if let Some(s) = data.first() {
        let shape = s.depth.shape();
        if shape != [cfg.model.input_height, cfg.model.input_width] {
            return Err(Error::Data(format!(
                "dataset images are {shape:?}, model expects {}×{}",
                cfg.model.input_height, cfg.model.input_width
            )));
        }
    }
    Ok(())
}

/// The run configuration after applying command-line overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfigFile> {
    let mut cfg = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if a.no_dgpg {
        cfg.model.enable_dgpg = false;
    }
    if a.no_gsa {
        cfg.model.gema.enable_gsa = false;
    }
    if a.no_ema {
        cfg.model.gema.enable_ema = false;
    }
    if let Some(f) = a.factor {
        cfg.model.gema.ema_factor = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let out = output_dir(a.out.clone(), "train");
    let (train_set, val_set) = match &a.data {
        Some(root) => {
            let train_set = dataset::load_dataset(root.join("train"))?;
            let val_dir = root.join("val");
            let val_set = if val_dir.join(dataset::MANIFEST_FILE).exists() {
                Some(dataset::load_dataset(val_dir)?)
            } else {
                None
            };
            (train_set, val_set)
        }
        None => {
            let size = square_size(&cfg)?;
            let seed = cfg.train.seed;
            let train_counts = scaled_counts(&REFERENCE_TRAIN_COUNTS, cfg.data.train_scale)?;
            let val_counts = scaled_counts(&REFERENCE_VAL_COUNTS, cfg.data.val_scale)?;
            (
                dataset::generate_in_memory(&train_counts, seed, "train", size)?,
                Some(dataset::generate_in_memory(&val_counts, seed, "val", size)?),
            )
        }
    };
    check_size(&train_set, &cfg)?;
    create_dir(&out)?;
    json::write_canonical(&cfg, out.join("config.json"))?;

    let mut model = GeoRepNet::new(cfg.model.clone(), cfg.train.seed)?;
    let quiet = a.quiet;
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.5}  train acc {:.4}  lr {:.3e}",
                r.epoch, r.loss, r.train_accuracy, r.lr
            );
        }
    };
    let history = train(&mut model, &train_set, &cfg.train, &mut progress)?;
    checkpoint::save(&model, out.join("checkpoint.grck"))?;
    json::write_canonical(&history, out.join("history.json"))?;

    #[derive(Serialize)]
    struct Summary {
        checkpoint: String,
        epochs: usize,
        final_loss: f64,
        final_train_accuracy: f64,
        validation: Option<MetricsReport>,
    }
    let validation = match &val_set {
        Some(v) => {
            check_size(v, &cfg)?;
            let report = evaluate(&model, v, EVAL_BATCH)?;
            json::write_canonical(&report, out.join("metrics.json"))?;
            Some(report)
        }
        None => None,
    };
    let last = history.last().expect("at least one epoch");
    emit(
        &Summary {
            checkpoint: out.join("checkpoint.grck").display().to_string(),
            epochs: history.len(),
            final_loss: last.loss,
            final_train_accuracy: last.train_accuracy,
            validation,
        },
        None,
    )
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let data = match &a.data {
        Some(dir) => dataset::load_dataset(dir)?,
        None => {
            let (h, w) = (model.config.input_height, model.config.input_width);
            if h != w {
                return Err(Error::Usage(format!("synthetic images are square, model expects {h}×{w}")));
            }
            dataset::generate_in_memory(&REFERENCE_VAL_COUNTS, a.seed, "val", h)?
        }
    };
    if let Some(s) = data.first() {
        if s.depth.shape() != [model.config.input_height, model.config.input_width] {
            return Err(Error::Data(format!(
                "dataset images are {:?}, model expects {}×{}",
                s.depth.shape(),
                model.config.input_height,
                model.config.input_width
            )));
        }
    }
    let report = evaluate(&model, &data, EVAL_BATCH)?;
    emit(&report, a.out.as_deref())
}

fn reparam_cmd(a: ReparamArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let fused = model.reparameterize()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    checkpoint::save(&fused, &a.out)?;
    #[derive(Serialize)]
    struct Summary {
        out: String,
        blocks: usize,
        conv_invocations_before: usize,
        conv_invocations_after: usize,
    }
    emit(
        &Summary {
            out: a.out.display().to_string(),
            blocks: fused.blocks().len(),
            conv_invocations_before: model.conv_invocations(),
            conv_invocations_after: fused.conv_invocations(),
        },
        None,
    )
}

#[derive(Debug, Serialize)]
pub struct GradcheckGroup {
    pub worst_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub passed: bool,
    pub max_rel_error: f64,
    pub skipped_kinks: usize,
    pub groups: BTreeMap<String, GradcheckGroup>,
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if !(a.tol > 0.0) {
        return Err(Error::Usage(format!("tolerance must be positive, got {}", a.tol)));
    }
    let mut model_cfg = match &a.config {
        Some(p) => RunConfigFile::load(p)?.model,
        None => RunConfigFile::micro().model,
    };
    model_cfg.dtype = DType::F64;
    let cfg = GradCheckConfig {
        samples_per_tensor: a.samples.max(1),
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = check_config(&model_cfg, a.seed, &cfg)?;
    let max = report.max_rel_error();
    let summary = GradcheckSummary {
        tolerance: a.tol,
        passed: max <= a.tol,
        max_rel_error: max,
        skipped_kinks: report.skipped_kinks,
        groups: report
            .groups()
            .into_iter()
            .map(|(k, (worst, checked))| {
                (
                    k,
                    GradcheckGroup {
                        worst_rel_error: worst,
                        checked,
                    },
                )
            })
            .collect(),
    };
    emit(&summary, a.out.as_deref())?;
    if summary.passed {
        Ok(())
    } else {
        Err(Error::Data(format!("gradient check failed: max relative error {max:.3e} exceeds {}", a.tol)))
    }
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let multi = checkpoint::load(&a.checkpoint)?;
    let fused = match &a.fused {
        Some(p) => checkpoint::load(p)?,
        None => multi.reparameterize()?,
    };
    let report = bench::bench(&multi, &fused, a.iters as usize, a.batch as usize, a.seed)?;
    emit(&report, a.out.as_deref())
}
