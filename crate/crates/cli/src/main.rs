//! `hcl`: data generation, training, evaluation and kernel analysis for
//! hyper-convolution networks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hcl_core::analysis::{self, ReconstructionRecord};
use hcl_core::checks::{self, GradCheck};
use hcl_core::data::{self, SyntheticDataConfig};
use hcl_core::nets::{ArchitectureSpec, Network};
use hcl_core::training::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "hcl", version, about = "Hyper-convolution networks: data, training, evaluation and kernel analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic lesion dataset (train/val/test splits).
    GenData(GenDataArgs),
    /// Train a network; writes the history CSV and the best checkpoint.
    Train(TrainArgs),
    /// Dice score and soft Dice loss of a checkpoint on one split.
    Eval(EvalArgs),
    /// Parameter counts and receptive fields for a list of architectures.
    Report(ReportArgs),
    /// Kernel Laplacian statistics of a network.
    AnalyzeKernels(AnalyzeArgs),
    /// Fit hypernetworks of several widths to a kernel bank.
    Reconstruct(ReconstructArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_train: Option<usize>,
    #[arg(long)]
    num_val: Option<usize>,
    #[arg(long)]
    num_test: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding `train/` and `val/`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for `history.csv`, `best/` and `run.json`.
    #[arg(long)]
    out: PathBuf,
    /// Architecture name, e.g. `unet3`, `hyperunet5-nl4-c8`, `hyperflat`.
    #[arg(long, default_value = "unet3", conflicts_with = "arch_config")]
    arch: String,
    /// JSON architecture spec instead of a name.
    #[arg(long)]
    arch_config: Option<PathBuf>,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Disable flips, rotation and scaling.
    #[arg(long)]
    no_augment: bool,
    /// Suppress per-epoch output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split directory (holding `manifest.json`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Also write the metrics as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Comma-separated architecture names.
    #[arg(long, value_delimiter = ',', default_value = "unet3,unet5,unet7,dilated-unet3,hyperunet5-nl2,hyperunet5-nl4,hyperunet5-nl8,flat,hyperflat")]
    spec: Vec<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint directory; otherwise a freshly initialized `--arch`.
    #[arg(long, conflicts_with = "arch")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `report.json`, kernel tensors and CSV grids.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write PGM images of kernels and Laplacian maps (needs `--out`).
    #[arg(long, requires = "out")]
    pgm: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Take the target kernel from this checkpoint (with `--layer`);
    /// otherwise a Gaussian-smoothed random bank is used.
    #[arg(long, requires = "layer")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    layer: Option<String>,
    /// Hypernetwork last-layer widths to try.
    #[arg(long, value_delimiter = ',', default_value = "2,8,24")]
    nl: Vec<usize>,
    #[arg(long, default_value_t = analysis::RECONSTRUCT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = analysis::RECONSTRUCT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random bank: input channels, output channels, kernel size, blur width.
    #[arg(long, default_value_t = 16)]
    nin: usize,
    #[arg(long, default_value_t = 16)]
    nout: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Write the results as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Operation name, `hyperconv`, `hyperunet`, or `all`.
    #[arg(long, default_value = "all")]
    layer: String,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    nl: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Spatial size for `hyperunet`.
    #[arg(long, default_value_t = 16)]
    size: usize,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: SyntheticDataConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticDataConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.num_train = a.num_train.unwrap_or(cfg.num_train);
    cfg.num_val = a.num_val.unwrap_or(cfg.num_val);
    cfg.num_test = a.num_test.unwrap_or(cfg.num_test);
    cfg.image_size = a.image_size.unwrap_or(cfg.image_size);
    for m in data::gen_synthetic(&cfg, &a.out)? {
        println!("{:<5} {:>5} samples {:?} mean {:.4} std {:.4}", m.split, m.count, m.image_shape, m.normalization.mean, m.normalization.std);
    }
    println!("config hash {}", cfg.hash());
    Ok(())
}

#[derive(Serialize)]
struct RunRecord<'a> {
    arch: &'a ArchitectureSpec,
    train: &'a TrainConfig,
    params: usize,
    best_epoch: usize,
}

fn train(a: TrainArgs) -> Result<()> {
    let spec = match &a.arch_config {
        Some(p) => read_json(p)?,
        None => ArchitectureSpec::from_name(&a.arch)?,
    };
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    if a.no_augment {
        cfg.augment = training::AugmentConfig::none();
    }
    cfg.checkpoint_dir = Some(a.out.join("best"));
    cfg.validate()?;

    let train_set = data::load_dataset(&a.data.join("train"))?;
    let val_set = data::load_dataset(&a.data.join("val"))?;
    let net = Network::build(&spec, cfg.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if !a.quiet {
        println!("{}: {} parameters, {} train / {} val samples", spec.label(), net.param_count(), train_set.len(), val_set.len());
    }
    let quiet = a.quiet;
    let out = training::train_with(&net, &train_set, &val_set, &cfg, |r| {
        if !quiet {
            println!("epoch {:>4}  train_loss {:.5}  val_loss {:.5}  val_dice {:.4}", r.epoch, r.train_loss, r.val_loss, r.val_dice);
        }
    })?;
    out.history.write_csv(&a.out.join("history.csv"))?;
    let record = RunRecord {
        arch: &spec,
        train: &cfg,
        params: net.param_count(),
        best_epoch: out.history.best_epoch,
    };
    write_json(&a.out.join("run.json"), &record)?;
    if let Some(best) = out.history.best() {
        println!("best epoch {}  val_loss {:.5}  val_dice {:.4}", best.epoch, best.val_loss, best.val_dice);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    samples: usize,
    dice: f64,
    loss: f64,
    per_sample_dice: Vec<f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = Network::load(&a.checkpoint)?;
    let set = data::load_dataset(&a.data)?;
    let e = training::evaluate(&net, &set, TrainConfig::default().dice_epsilon, a.batch_size, TrainConfig::default().precision)?;
    println!("samples {}  dice {:.4}  soft_dice_loss {:.5}", set.len(), e.dice, e.loss);
    if let Some(p) = &a.out {
        write_json(
            p,
            &EvalRecord {
                samples: set.len(),
                dice: e.dice,
                loss: e.loss,
                per_sample_dice: e.per_sample_dice,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    spec: String,
    label: String,
    kernel_size: usize,
    params: usize,
    receptive_field: usize,
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for name in &a.spec {
        let spec = ArchitectureSpec::from_name(name.trim())?;
        let net = Network::build(&spec, 0)?;
        rows.push(ReportRow {
            spec: name.trim().to_string(),
            label: spec.label(),
            kernel_size: spec.kernel_size,
            params: net.param_count(),
            receptive_field: spec.receptive_field(),
        });
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
        return Ok(());
    }
    println!("{:<18} {:<28} {:>12} {:>16}", "spec", "architecture", "params", "receptive_field");
    for r in &rows {
        println!(
            "{:<18} {:<28} {:>12} {:>16}",
            r.spec,
            r.label,
            format!("{} ({:.3}M)", r.params, r.params as f64 / 1e6),
            r.receptive_field
        );
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let net = match (&a.checkpoint, &a.arch) {
        (Some(dir), _) => Network::load(dir)?,
        (None, Some(name)) => Network::build(&ArchitectureSpec::from_name(name)?, a.seed)?,
        (None, None) => bail!("pass --checkpoint or --arch"),
    };
    let r = analysis::network_kernel_report(&net)?;
    print!("{}", analysis::format_report(&r));
    if let Some(out) = &a.out {
        r.write(out, a.pgm)?;
    }
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let (name, target) = match (&a.checkpoint, &a.layer) {
        (Some(dir), Some(layer)) => {
            let net = Network::load(dir)?;
            let r = analysis::network_kernel_report(&net)?;
            let l = r.layer(layer).with_context(|| format!("no convolution named {layer:?} in {}", dir.display()))?;
            (layer.clone(), l.kernel.clone().context("report holds no kernel")?)
        }
        _ => (
            format!("smooth-random {}x{} {}x{} sigma {}", a.nout, a.nin, a.k, a.k, a.sigma),
            analysis::smooth_random_kernels(a.nout, a.nin, a.k, a.sigma, a.seed),
        ),
    };
    let var = analysis::variance(&target);
    let mut records = Vec::new();
    for &nl in &a.nl {
        let (_, mse) = analysis::reconstruct_kernel(&target, nl, a.steps, a.lr, a.seed)?;
        let rec = ReconstructionRecord {
            layer: name.clone(),
            last_width: nl,
            steps: a.steps,
            lr: a.lr,
            mse,
            relative_mse: if var > 0.0 { mse / var } else { mse },
        };
        println!("N_L {:>3}  mse {:.4e}  relative_mse {:.4e}", nl, rec.mse, rec.relative_mse);
        records.push(rec);
    }
    if let Some(p) = &a.out {
        write_json(p, &records)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let results: Vec<GradCheck> = match a.layer.as_str() {
        "all" => checks::check_all(a.k, a.nl, a.seed)?,
        "hyperunet" => vec![checks::check_hyper_unet(a.k, a.nl, 4, a.size, 6, a.seed)?],
        op => vec![checks::check_op(op, a.k, a.nl, a.seed)?],
    };
    let mut worst = 0.0f64;
    for c in &results {
        println!(
            "{:<34} max_rel_error {:.3e}  entries {:>5}  tol {:.0e}  {}",
            c.name,
            c.max_rel_error,
            c.entries,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(c.max_rel_error);
    }
    println!("max rel error {worst:.3e}");
    Ok(results.iter().all(GradCheck::passed))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HCL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HCL_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Report(a) => report(a)?,
        Command::AnalyzeKernels(a) => analyze(a)?,
        Command::Reconstruct(a) => reconstruct(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
