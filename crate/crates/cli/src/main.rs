//! `dicycle`: data generation, training, synthesis, evaluation and model comparison.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dicycle_core::data::{build_dataset, read_png, write_png16, Dataset};
use dicycle_core::deform::DeformMode;
use dicycle_core::experiment::{self, compare, eval_dir, evaluate_run, ExperimentConfig, Model};
use dicycle_core::training::{load_checkpoint, synthesize, train, Direction, TrainOptions, LAST_DIR};

use crate::config::{deterministic_from_env, split_epochs, write_resolved, RESOLVED_CONFIG};

#[derive(Parser)]
#[command(
    name = "dicycle",
    version,
    about = "Deformation-invariant unpaired image translation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain phantom dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Translate PNG images with a trained model.
    Synth(SynthArgs),
    /// Score a trained model on the test split.
    Eval(EvalArgs),
    /// Train and evaluate both models over several seeds.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum domain-B displacement in pixels.
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

/// Training overrides shared by `train` and `compare`.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total epochs, split evenly between the constant and the decaying stage.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    resnet_blocks: Option<usize>,
    /// Generator base width.
    #[arg(long)]
    width: Option<usize>,
    /// Discriminator base width.
    #[arg(long)]
    disc_width: Option<usize>,
    /// Disable data augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dicycle")]
    model: Model,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the run's last checkpoint.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct SynthArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    /// A PNG file or a directory of PNG files (intensities in [0, 1]).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "a2b")]
    direction: Direction,
    #[arg(long, default_value = "undeformed")]
    mode: DeformMode,
    #[arg(long, default_value = LAST_DIR)]
    checkpoint: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    direction: Option<Direction>,
    #[arg(long)]
    mode: Option<DeformMode>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    nmi_bins: Option<usize>,
    /// Score the ground truth against itself (pipeline check).
    #[arg(long)]
    self_test: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds per model.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// First seed; the others follow consecutively.
    #[arg(long, default_value_t = 1)]
    first_seed: u64,
    #[arg(long)]
    direction: Option<Direction>,
    #[arg(long)]
    mode: Option<DeformMode>,
    #[command(flatten)]
    train: TrainOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

const DATASET_ENTRIES: [&str; 7] = [
    "domain_a",
    "domain_b",
    "gt_b_aligned",
    "gt_a_deformed",
    "masks",
    "manifest.json",
    RESOLVED_CONFIG,
];

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = config::load(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.data.seed = v;
    }
    if let Some(v) = a.amplitude {
        cfg.data.amplitude = v;
    }
    if let Some(v) = a.n_train {
        cfg.data.n_train = v;
    }
    if let Some(v) = a.n_test {
        cfg.data.n_test = v;
    }
    cfg.data.validate()?;
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !a.force {
            bail!("{} is not empty (use --force to overwrite)", a.out.display());
        }
        for entry in DATASET_ENTRIES {
            let p = a.out.join(entry);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            } else if p.exists() {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let manifest = build_dataset(&cfg.data, &a.out)?;
    write_resolved(&a.out, &cfg)?;
    println!(
        "wrote {}: n_A = {}, n_B = {}, n_test = {}, deformation amplitude = {} px",
        a.out.display(),
        manifest.n_a,
        manifest.n_b,
        manifest.n_test,
        manifest.deformation.amplitude
    );
    Ok(())
}

fn apply_train_overrides(cfg: &mut ExperimentConfig, o: &TrainOverrides) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(n) = o.epochs {
        (t.epochs_phase1, t.epochs_phase2) = split_epochs(n);
    }
    if let Some(v) = o.lr {
        t.lr = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.resnet_blocks {
        t.generator.resnet_blocks = v;
    }
    if let Some(v) = o.width {
        t.generator.base_width = v;
    }
    if let Some(v) = o.disc_width {
        t.discriminator.base_width = v;
    }
    if o.no_augment {
        t.augment = dicycle_core::data::AugmentPolicy::identity();
    }
    if let Some(d) = deterministic_from_env()? {
        t.deterministic = d;
    }
    Ok(())
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

fn print_epoch(prefix: &str) -> impl FnMut(&dicycle_core::training::EpochSummary) + '_ {
    move |s| println!("{prefix}{s}")
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dataset = open_dataset(&a.data)?;
    let mut cfg = if a.resume {
        config::load(Some(&a.out.join(RESOLVED_CONFIG)))?
    } else {
        config::load(a.train.config.as_deref())?
    };
    cfg.data = dataset.manifest.config.clone();
    apply_train_overrides(&mut cfg, &a.train)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train = a.model.config(&cfg.train, cfg.train.seed);
    cfg.train.validate()?;
    write_resolved(&a.out, &cfg)?;
    let options = TrainOptions {
        resume: a.resume.then(|| a.out.join(LAST_DIR)),
        max_epochs: None,
    };
    let outcome = train(&cfg.train, &dataset, &a.out, &options, &mut print_epoch(""))?;
    println!(
        "trained {} for {} epochs ({} iterations); log {}",
        a.model.as_str(),
        outcome.progress.epochs_completed,
        outcome.progress.iteration,
        outcome.log.display()
    );
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    Ok(files)
}

fn synth(a: SynthArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.run.join(&a.checkpoint))?;
    let files = png_inputs(&a.input)?;
    let images = files
        .iter()
        .map(|f| read_png(f, [0.0, 1.0]))
        .collect::<dicycle_core::Result<Vec<_>>>()?;
    let out = synthesize(&ckpt, &images, a.direction, a.mode)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (f, s) in files.iter().zip(&out) {
        let name = f.file_name().context("input file name")?;
        write_png16(&a.out.join(name), &s.unit, [-1.0, 1.0])?;
    }
    let mut cfg = config::load(Some(&a.run.join(RESOLVED_CONFIG))).unwrap_or_default();
    cfg.train = ckpt.manifest.config.clone();
    cfg.eval.direction = a.direction;
    cfg.eval.mode = a.mode;
    cfg.eval.checkpoint = a.checkpoint.clone();
    write_resolved(&a.out, &cfg)?;
    println!(
        "translated {} image(s) {} ({}) into {}",
        out.len(),
        a.direction,
        a.mode,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset = open_dataset(&a.data)?;
    let resolved = a.run.join(RESOLVED_CONFIG);
    let mut cfg = if resolved.exists() {
        config::load(Some(&resolved))?
    } else {
        ExperimentConfig::default()
    };
    if let Some(v) = a.direction {
        cfg.eval.direction = v;
    }
    if let Some(v) = a.mode {
        cfg.eval.mode = v;
    }
    if let Some(v) = a.checkpoint {
        cfg.eval.checkpoint = v;
    }
    if let Some(v) = a.nmi_bins {
        cfg.eval.nmi_bins = v;
    }
    let report = evaluate_run(&a.run, &dataset, &cfg.eval, a.self_test)?;
    let out = eval_dir(&a.run, &cfg.eval);
    write_resolved(&out, &cfg)?;
    let m = &report.metrics;
    println!(
        "{} {} vs {} (n = {}): MSE {}  PSNR {}  SSIM {}  NMI {}",
        report.direction,
        report.mode,
        report.ground_truth,
        report.n_test,
        m.mse.cell(),
        m.psnr.cell(),
        m.ssim.cell(),
        m.nmi.cell()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let dataset = open_dataset(&a.data)?;
    let mut cfg = config::load(a.train.config.as_deref())?;
    cfg.data = dataset.manifest.config.clone();
    apply_train_overrides(&mut cfg, &a.train)?;
    if let Some(v) = a.direction {
        cfg.eval.direction = v;
    }
    if let Some(v) = a.mode {
        cfg.eval.mode = v;
    }
    cfg.train.validate()?;
    write_resolved(&a.out, &cfg)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.first_seed + i).collect();
    let report = compare(&cfg.train, &dataset, &a.out, &seeds, &cfg.eval, &mut |m, s, e| {
        println!("{} seed {s}: {e}", m.as_str())
    })?;
    print!("{}", report.to_csv());
    println!("wrote {}", a.out.join(experiment::COMPARISON_JSON).display());
    Ok(())
}
