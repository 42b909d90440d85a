//! `mdsam`: train, evaluate, run inference, ablate and inspect saliency
//! models from the command line.

mod config;
mod plot;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdsam_core::ablation::{run_ablation, write_ablation_csv};
use mdsam_core::checkpoint;
use mdsam_core::config::config_hash;
use mdsam_core::data::{check_size, DatasetManifest, Normalization};
use mdsam_core::infer::infer_dir;
use mdsam_core::metrics::{evaluate_dataset, read_curves_csv, write_curves_csv, write_report_csv};
use mdsam_core::model::Module;
use mdsam_core::train::{train, TrainOptions, LATEST};
use mdsam_core::{build_model, Error, ParamGroup};
use serde::Serialize;

use crate::config::{preset, RunConfig};
use crate::plot::{line_chart, Axes, Series};

#[derive(Parser)]
#[command(name = "mdsam", version, about = "Salient object detection with a multi-scale adapted ViT encoder")]
struct Cli {
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, env = "MDSAM_DEVICE", default_value = "cpu")]
    device: String,

    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and a loss log under --out-dir.
    Train(TrainArgs),
    /// Score a directory of predicted maps against ground-truth masks.
    Eval(EvalArgs),
    /// Predict saliency maps for every image in a directory.
    Infer(InferArgs),
    /// Train and score every row of an ablation matrix.
    Ablate(AblateArgs),
    /// Plot precision-recall and F-measure curves from curve CSVs.
    Curves(CurvesArgs),
    /// Print total and per-group parameter counts.
    Params(ParamsArgs),
    /// Write a seeded synthetic image/mask dataset with its manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest; overrides data.manifest in the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for checkpoints, the loss log and the resolved config.
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from <out-dir>/latest.ckpt.
    #[arg(long, conflicts_with = "resume_from")]
    resume: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume_from: Option<PathBuf>,
    /// Initialize matching weights from this checkpoint before training.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Ablation variant a-f; overrides the config.
    #[arg(long)]
    variant: Option<String>,
    /// Square training resolution (multiple of 16); overrides the config.
    #[arg(long)]
    resolution: Option<usize>,
    /// Number of epochs; overrides train.max_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size; overrides train.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate of new modules; overrides train.lr_new.
    #[arg(long)]
    lr_new: Option<f64>,
    /// Learning rate of pretrained modules; overrides train.lr_pretrained.
    #[arg(long)]
    lr_pretrained: Option<f64>,
    /// Warmup epochs; overrides train.warmup_epochs.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Training seed (shuffling, augmentation); overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted maps (8-bit grayscale).
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth masks; files pair by stem.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Per-image and aggregate metric CSV.
    #[arg(long)]
    out_csv: PathBuf,
    /// Dataset threshold curves CSV [default: <out-csv stem>_curves.csv].
    #[arg(long)]
    curves_csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input images.
    #[arg(long)]
    image_dir: PathBuf,
    /// Output directory; one <stem>.png per readable input.
    #[arg(long)]
    out_dir: PathBuf,
    /// Square working resolution, a multiple of 16 [default: the checkpoint's].
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// Run configuration with an optional [ablation] table.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV, one row per matrix entry.
    #[arg(long)]
    out_csv: PathBuf,
    /// Epochs per entry; overrides train.max_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed; overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Curve CSV written by `eval`; repeat to overlay methods.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Directory for pr_curve.svg and f_curve.svg.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: toy or sam_b.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images/, masks/ and manifest.toml.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split name stored in the manifest.
    #[arg(long, default_value = "train")]
    split: String,
}

/// Errors raised by the command layer itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFinite { .. } => 3,
                Error::Shape(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        return Err(usage(format!("device `{}` is not available (only cpu)", cli.device)));
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Params(a) => cmd_params(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(m) = a.manifest {
        run.data.manifest = Some(m);
    }
    run.variant = a.variant.or(run.variant);
    run.resolution = a.resolution.or(run.resolution);
    let t = &mut run.train;
    t.max_epochs = a.epochs.unwrap_or(t.max_epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr_new = a.lr_new.unwrap_or(t.lr_new);
    t.lr_pretrained = a.lr_pretrained.unwrap_or(t.lr_pretrained);
    t.warmup_epochs = a.warmup_epochs.unwrap_or(t.warmup_epochs);
    t.seed = a.seed.unwrap_or(t.seed);

    let mcfg = run.model_config()?;
    let tcfg = run.train_config()?;
    let samples = run.train_samples(mcfg.resolution)?;
    let mut model = build_model(&mcfg)?;
    if let Some(p) = &a.pretrained {
        let weights = checkpoint::weights_of(&checkpoint::load(p)?);
        let s = checkpoint::import_pretrained(&mut model, &weights)?;
        log::info!("imported {} tensors ({} resized, {} kept at init)", s.loaded, s.resized.len(), s.kept_init.len());
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let resolved = toml::to_string(&run).context("cannot serialize the resolved config")?;
    std::fs::write(a.out_dir.join("config.toml"), resolved)?;
    let resume = match (a.resume, a.resume_from) {
        (_, Some(p)) => Some(p),
        (true, None) => Some(a.out_dir.join(LATEST)),
        (false, None) => None,
    };
    let opts = TrainOptions {
        out_dir: Some(a.out_dir.clone()),
        resume,
        max_steps: a.max_steps,
    };
    log::info!("training {} on {} samples", mcfg.variant_label().unwrap_or("model"), samples.len());
    let report = train(&mut model, &samples, &tcfg, &opts)?;
    let last = report.epoch_losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"));
    println!(
        "epochs {} steps {} final_loss {last} checkpoint {}",
        report.epochs_done,
        report.steps.last().map_or(0, |s| s.step),
        a.out_dir.join(LATEST).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalProvenance<'a> {
    pred_dir: &'a Path,
    gt_dir: &'a Path,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    for (what, dir) in [("pred-dir", &a.pred_dir), ("gt-dir", &a.gt_dir)] {
        if !dir.is_dir() {
            return Err(usage(format!("--{what} {} is not a directory", dir.display())));
        }
    }
    let report = evaluate_dataset(&a.pred_dir, &a.gt_dir)?;
    let hash = config_hash(&EvalProvenance {
        pred_dir: &a.pred_dir,
        gt_dir: &a.gt_dir,
    });
    create_parent(&a.out_csv)?;
    write_report_csv(BufWriter::new(File::create(&a.out_csv)?), &report, &hash)?;
    let curves_path = a.curves_csv.unwrap_or_else(|| {
        let stem = a.out_csv.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        a.out_csv.with_file_name(format!("{stem}_curves.csv"))
    });
    create_parent(&curves_path)?;
    write_curves_csv(BufWriter::new(File::create(&curves_path)?), &report.curves, &hash)?;
    println!("{}", report.summary_line());
    if !report.unmatched.is_empty() {
        eprintln!("warning: {} unmatched files: {}", report.unmatched.len(), report.unmatched.join(", "));
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?.into_model();
    let resolution = a.resolution.unwrap_or(model.cfg.resolution);
    check_size(resolution)?;
    let report = infer_dir(&model, &a.image_dir, &a.out_dir, resolution, &Normalization::default())?;
    for (id, reason) in &report.skipped {
        eprintln!("warning: skipped {id}: {reason}");
    }
    println!("wrote {} masks to {} ({} skipped)", report.written.len(), a.out_dir.display(), report.skipped.len());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    run.train.max_epochs = a.epochs.unwrap_or(run.train.max_epochs);
    run.train.seed = a.seed.unwrap_or(run.train.seed);
    let matrix = run.matrix()?;
    let tcfg = run.train_config()?;
    let size = run.model_config()?.resolution;
    let train_set = run.train_samples(size)?;
    let eval_set = run.eval_samples(size, &train_set)?;
    let rows = run_ablation(&matrix, &train_set, &eval_set, &tcfg);
    create_parent(&a.out_csv)?;
    write_ablation_csv(BufWriter::new(File::create(&a.out_csv)?), &rows, &config_hash(&run))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    for r in &rows {
        match &r.error {
            None => println!("{}: loss {:.4} mae {:.4} fmax {:.4}", r.label, r.final_loss, r.mae, r.f_max),
            Some(e) => println!("{}: failed: {e}", r.label),
        }
    }
    if failed == rows.len() {
        bail!(usage(format!("all {failed} ablation rows failed")));
    }
    Ok(())
}

fn cmd_curves(a: CurvesArgs) -> Result<()> {
    let mut pr = Vec::new();
    let mut fc = Vec::new();
    for path in &a.inputs {
        let file = File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))?;
        let (curves, _) = read_curves_csv(file).with_context(|| format!("malformed curve file {}", path.display()))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string();
        let n = curves.f.len() as f64;
        pr.push(Series {
            name: name.clone(),
            points: curves.recall.iter().zip(&curves.precision).map(|(&r, &p)| (r, p)).collect(),
        });
        fc.push(Series {
            name,
            points: curves.f.iter().enumerate().map(|(t, &f)| (t as f64 / n, f)).collect(),
        });
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let pr_path = a.out_dir.join("pr_curve.svg");
    let f_path = a.out_dir.join("f_curve.svg");
    let unit = (0.0, 1.0);
    std::fs::write(
        &pr_path,
        line_chart(
            &Axes {
                title: "Precision-recall",
                x_label: "Recall",
                y_label: "Precision",
                x_range: unit,
                y_range: unit,
            },
            &pr,
        ),
    )?;
    std::fs::write(
        &f_path,
        line_chart(
            &Axes {
                title: "F-measure",
                x_label: "Threshold",
                y_label: "F-measure",
                x_range: unit,
                y_range: unit,
            },
            &fc,
        ),
    )?;
    println!("wrote {} and {}", pr_path.display(), f_path.display());
    Ok(())
}

fn millions(n: usize) -> String {
    format!("{:.2}M ({n})", n as f64 / 1e6)
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let cfg = match (&a.config, &a.preset) {
        (Some(path), _) => RunConfig::load(path)?.model_config()?,
        (None, Some(p)) => preset(p)?,
        (None, None) => return Err(usage("give --config or --preset")),
    };
    let b = build_model(&cfg)?.breakdown();
    println!("total {}", millions(b.total));
    println!("trainable {}", millions(b.total - b.by_group[&ParamGroup::Frozen]));
    for g in ParamGroup::ALL {
        println!("group {} {}", g.name(), millions(b.by_group[&g]));
    }
    for m in Module::ALL {
        println!("module {} {}", m.name(), millions(b.by_module[&m]));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 || a.size == 0 {
        return Err(usage("--count and --size must be positive"));
    }
    let path = mdsam_core::synth::write_dataset(&a.out_dir, &a.split, a.count, a.size, a.seed)?;
    DatasetManifest::load(&path)?;
    println!("wrote {} images and {}", a.count, path.display());
    Ok(())
}
