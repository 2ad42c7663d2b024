//! The optimization engine.
//!
//! Each iteration first updates both generators against frozen discriminators and
//! then both discriminators on replay-buffered deformed fakes. The learning rate is
//! constant for `epochs_phase1` epochs and then decays linearly to zero; a stalled
//! epoch-mean generator loss ends either phase early.

mod checkpoint;
mod optim;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{augment, to_unit, unpaired_order, AugmentPolicy, Dataset, Domain, Image, ImageBatch, Split};
use crate::deform::DeformMode;
use crate::error::{Error, Result};
use crate::losses::{
    tape_alignment, tape_cycle_l1, tape_lsgan_discriminator, tape_lsgan_generator, LossReport, LossWeights,
    SoftNmiConfig,
};
use crate::networks::{
    bind, build_discriminator, build_generator, discriminator_tape, generator_tape, DiscriminatorConfig,
    DiscriminatorParams, GeneratorConfig, GeneratorParams,
};
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, NetworkManifest, ParamManifest, BEST_DIR,
    LAST_DIR, MANIFEST_FILE,
};
pub use optim::{Adam, AdamConfig, ReplayBuffer};

/// File name of the per-iteration loss log inside a run directory.
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub early_stop_tolerance_phase1: usize,
    pub early_stop_tolerance_phase2: usize,
    /// Smallest decrease of the best epoch loss that counts as improvement.
    pub min_delta: f64,
    pub replay_buffer_size: usize,
    pub replay_swap_prob: f64,
    /// Factor on the discriminator objective.
    pub disc_loss_scale: f64,
    pub seed: u64,
    /// Plain CycleGAN: no offset branch, no alignment or deformed-cycle terms.
    pub baseline_mode: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub nmi: SoftNmiConfig,
    pub augment: AugmentPolicy,
    /// Write `ckpt_epoch_XXX` after every this many completed epochs (0 = never).
    pub checkpoint_every: usize,
    /// Recorded for reproducibility; the CPU engine is always deterministic.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 100,
            epochs_phase2: 100,
            lr: 2e-4,
            adam_betas: (0.5, 0.999),
            adam_eps: 1e-8,
            batch_size: 1,
            weights: LossWeights::default(),
            early_stop_tolerance_phase1: 10,
            early_stop_tolerance_phase2: 20,
            min_delta: 1e-4,
            replay_buffer_size: 50,
            replay_swap_prob: 0.5,
            disc_loss_scale: 0.5,
            seed: 0,
            baseline_mode: false,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            nmi: SoftNmiConfig::default(),
            augment: AugmentPolicy::default(),
            checkpoint_every: 10,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// The same configuration turned into the CycleGAN baseline.
    pub fn into_baseline(mut self) -> Self {
        self.baseline_mode = true;
        self.weights.lambda_align = 0.0;
        self.weights.lambda_dicyc = 0.0;
        self
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    /// Loss weights actually optimized (baseline mode zeroes the Dicycle terms).
    pub fn effective_weights(&self) -> LossWeights {
        if self.baseline_mode {
            LossWeights::baseline(self.weights.lambda_cyc)
        } else {
            self.weights.clone()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.total_epochs() == 0 {
            return bad("at least one epoch is required".into());
        }
        if self.early_stop_tolerance_phase1 < 1 || self.early_stop_tolerance_phase2 < 1 {
            return bad("early-stop tolerances must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.adam_eps > 0.0) {
            return bad(format!(
                "invalid Adam parameters betas=({b1}, {b2}) eps={}",
                self.adam_eps
            ));
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta must be >= 0, got {}", self.min_delta));
        }
        if !(0.0..=1.0).contains(&self.replay_swap_prob) {
            return bad(format!(
                "replay_swap_prob must lie in [0, 1], got {}",
                self.replay_swap_prob
            ));
        }
        if !(self.disc_loss_scale > 0.0) || !self.disc_loss_scale.is_finite() {
            return bad(format!("disc_loss_scale must be > 0, got {}", self.disc_loss_scale));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.augment.validate()?;
        if self.generator.image_channels != self.discriminator.image_channels {
            return bad("generator and discriminator channel counts differ".into());
        }
        Ok(())
    }
}

/// Learning rate for a (0-based) epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    let (p1, p2) = (config.epochs_phase1, config.epochs_phase2);
    if epoch >= p1 + p2 {
        return Err(Error::Config(format!(
            "epoch {epoch} is past the {}-epoch schedule",
            p1 + p2
        )));
    }
    if epoch < p1 {
        Ok(config.lr)
    } else {
        Ok(config.lr * (1.0 - (epoch - p1) as f64 / p2 as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Constant learning rate.
    One,
    /// Linear decay.
    Two,
    Done,
}

/// Position in the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Schedule epoch of the next epoch to run.
    pub epoch: usize,
    pub phase: Phase,
    #[serde(with = "crate::metrics::lenient_f64")]
    pub best_total_loss: f64,
    pub epochs_since_improvement: usize,
    pub epochs_completed: usize,
    /// Number of training iterations run so far.
    pub iteration: usize,
}

impl Progress {
    /// Start of a schedule (phase 1 is skipped when it has no epochs).
    pub fn start(config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            phase: if config.epochs_phase1 == 0 {
                Phase::Two
            } else {
                Phase::One
            },
            best_total_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            epochs_completed: 0,
            iteration: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Continue,
    /// Phase 1 ended (stalled or exhausted); the schedule jumped to the decay stage.
    EnterPhase2,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub transition: Transition,
}

/// Account for a finished epoch and advance the schedule.
///
/// The best loss carries over into phase 2; the stall counter restarts there.
pub fn early_stop_update(progress: &mut Progress, config: &TrainConfig, epoch_avg_total_loss: f64) -> StopDecision {
    let improved = epoch_avg_total_loss < progress.best_total_loss - config.min_delta;
    if improved {
        progress.best_total_loss = epoch_avg_total_loss;
        progress.epochs_since_improvement = 0;
    } else {
        progress.epochs_since_improvement += 1;
    }
    progress.epochs_completed += 1;
    let p1 = config.epochs_phase1;
    let transition = match progress.phase {
        Phase::One => {
            progress.epoch += 1;
            if progress.epochs_since_improvement >= config.early_stop_tolerance_phase1 || progress.epoch >= p1 {
                progress.epoch = p1;
                progress.epochs_since_improvement = 0;
                if config.epochs_phase2 == 0 {
                    progress.phase = Phase::Done;
                    Transition::Stop
                } else {
                    progress.phase = Phase::Two;
                    Transition::EnterPhase2
                }
            } else {
                Transition::Continue
            }
        }
        Phase::Two => {
            progress.epoch += 1;
            if progress.epochs_since_improvement >= config.early_stop_tolerance_phase2
                || progress.epoch >= config.total_epochs()
            {
                progress.phase = Phase::Done;
                Transition::Stop
            } else {
                Transition::Continue
            }
        }
        Phase::Done => Transition::Stop,
    };
    StopDecision { improved, transition }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub progress: Progress,
    pub g_ab: GeneratorParams,
    pub g_ba: GeneratorParams,
    pub d_a: DiscriminatorParams,
    pub d_b: DiscriminatorParams,
    pub opt_g_ab: Adam,
    pub opt_g_ba: Adam,
    pub opt_d_a: Adam,
    pub opt_d_b: Adam,
    /// Earlier fake A images, shown to `d_a`.
    pub pool_a: ReplayBuffer,
    pub pool_b: ReplayBuffer,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let offsets = !config.baseline_mode;
        let g_ab = build_generator(&config.generator, offsets, &mut rng)?;
        let g_ba = build_generator(&config.generator, offsets, &mut rng)?;
        let d_a = build_discriminator(&config.discriminator, &mut rng)?;
        let d_b = build_discriminator(&config.discriminator, &mut rng)?;
        let adam = config.adam();
        Ok(Self {
            progress: Progress::start(config),
            opt_g_ab: Adam::new(&g_ab.params, adam),
            opt_g_ba: Adam::new(&g_ba.params, adam),
            opt_d_a: Adam::new(&d_a.params, adam),
            opt_d_b: Adam::new(&d_b.params, adam),
            pool_a: ReplayBuffer::new(config.replay_buffer_size, config.replay_swap_prob),
            pool_b: ReplayBuffer::new(config.replay_buffer_size, config.replay_swap_prob),
            g_ab,
            g_ba,
            d_a,
            d_b,
            rng,
            config: config.clone(),
        })
    }

    pub fn generator(&self, direction: Direction) -> &GeneratorParams {
        match direction {
            Direction::AToB => &self.g_ab,
            Direction::BToA => &self.g_ba,
        }
    }
}

fn take_grads(grads: &mut crate::autograd::Gradients<f32>, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn non_finite(progress: &Progress, report: &LossReport) -> Error {
    Error::NonFinite {
        iteration: progress.iteration,
        epoch: progress.epoch,
        components: format!("{report:?}"),
    }
}

/// One generator update followed by one discriminator update.
///
/// Losses are evaluated before the parameters change; a non-finite loss aborts
/// without touching the parameters.
pub fn training_step(state: &mut TrainState, batch_a: &ImageBatch, batch_b: &ImageBatch) -> Result<LossReport> {
    if batch_a.domain != Domain::A || batch_b.domain != Domain::B {
        return Err(Error::Config(
            "training_step expects a domain-A and a domain-B batch".into(),
        ));
    }
    let lr = lr_schedule(state.progress.epoch, &state.config)?;
    let weights = state.config.effective_weights();
    let dicycle = !state.config.baseline_mode;
    let mut report = LossReport::default();

    let mut tape = Tape::<f32>::new();
    let v_ab = bind(&mut tape, &state.g_ab.params, true);
    let v_ba = bind(&mut tape, &state.g_ba.params, true);
    let v_da = bind(&mut tape, &state.d_a.params, false);
    let v_db = bind(&mut tape, &state.d_b.params, false);
    let xa = tape.constant(batch_a.values.clone());
    let xb = tape.constant(batch_b.values.clone());
    let (g_ab, g_ba) = (&state.g_ab, &state.g_ba);

    let fake_b_t = generator_tape(&mut tape, g_ab, &v_ab, xa, DeformMode::Deformed)?;
    let fake_a_t = generator_tape(&mut tape, g_ba, &v_ba, xb, DeformMode::Deformed)?;
    let score_b = discriminator_tape(&mut tape, &state.d_b, &v_db, fake_b_t)?;
    let score_a = discriminator_tape(&mut tape, &state.d_a, &v_da, fake_a_t)?;
    let gan_ab = tape_lsgan_generator(&mut tape, score_b)?;
    let gan_ba = tape_lsgan_generator(&mut tape, score_a)?;

    // Without offsets both modes coincide, so the baseline reuses the deformed pass.
    let (fake_b, fake_a) = if dicycle {
        (
            generator_tape(&mut tape, g_ab, &v_ab, xa, DeformMode::Undeformed)?,
            generator_tape(&mut tape, g_ba, &v_ba, xb, DeformMode::Undeformed)?,
        )
    } else {
        (fake_b_t, fake_a_t)
    };
    let rec_a = generator_tape(&mut tape, g_ba, &v_ba, fake_b, DeformMode::Undeformed)?;
    let rec_b = generator_tape(&mut tape, g_ab, &v_ab, fake_a, DeformMode::Undeformed)?;
    let cyc = tape_cycle_l1(&mut tape, rec_a, xa, rec_b, xb)?;

    let mut terms = vec![(gan_ab, 1.0f32), (gan_ba, 1.0), (cyc, weights.lambda_cyc as f32)];
    if dicycle {
        let align = tape_alignment(&mut tape, xa, fake_b, xb, fake_a, &state.config.nmi)?;
        let rec_a_t = generator_tape(&mut tape, g_ba, &v_ba, fake_b_t, DeformMode::Deformed)?;
        let rec_b_t = generator_tape(&mut tape, g_ab, &v_ab, fake_a_t, DeformMode::Deformed)?;
        let dicyc = tape_cycle_l1(&mut tape, rec_a_t, xa, rec_b_t, xb)?;
        terms.push((align, weights.lambda_align as f32));
        terms.push((dicyc, weights.lambda_dicyc as f32));
        report.align = tape.scalar(align) as f64;
        report.dicyc = tape.scalar(dicyc) as f64;
    }
    let total = tape.linear(&terms, 0.0)?;
    report.gan_a2b = tape.scalar(gan_ab) as f64;
    report.gan_b2a = tape.scalar(gan_ba) as f64;
    report.cyc = tape.scalar(cyc) as f64;
    report.total = tape.scalar(total) as f64;
    if !report.all_finite() {
        return Err(non_finite(&state.progress, &report));
    }

    let fakes_b = tape.value(fake_b_t).clone();
    let fakes_a = tape.value(fake_a_t).clone();
    let mut grads = tape.backward(total)?;
    let g_ab_grads = take_grads(&mut grads, &v_ab);
    let g_ba_grads = take_grads(&mut grads, &v_ba);
    drop(tape);

    // Discriminators see the pre-update deformed fakes, mixed with older ones.
    let pooled_b = state.pool_b.query_batch(&fakes_b, &mut state.rng)?;
    let pooled_a = state.pool_a.query_batch(&fakes_a, &mut state.rng)?;
    let mut dtape = Tape::<f32>::new();
    let w_da = bind(&mut dtape, &state.d_a.params, true);
    let w_db = bind(&mut dtape, &state.d_b.params, true);
    let real_a = dtape.constant(batch_a.values.clone());
    let real_b = dtape.constant(batch_b.values.clone());
    let fake_a = dtape.constant(pooled_a);
    let fake_b = dtape.constant(pooled_b);
    let ra = discriminator_tape(&mut dtape, &state.d_a, &w_da, real_a)?;
    let fa = discriminator_tape(&mut dtape, &state.d_a, &w_da, fake_a)?;
    let rb = discriminator_tape(&mut dtape, &state.d_b, &w_db, real_b)?;
    let fb = discriminator_tape(&mut dtape, &state.d_b, &w_db, fake_b)?;
    let loss_a = tape_lsgan_discriminator(&mut dtape, ra, fa)?;
    let loss_b = tape_lsgan_discriminator(&mut dtape, rb, fb)?;
    let s = state.config.disc_loss_scale as f32;
    let d_total = dtape.linear(&[(loss_a, s), (loss_b, s)], 0.0)?;
    report.disc_a = dtape.scalar(loss_a) as f64;
    report.disc_b = dtape.scalar(loss_b) as f64;
    if !report.all_finite() {
        return Err(non_finite(&state.progress, &report));
    }
    let mut dgrads = dtape.backward(d_total)?;
    let d_a_grads = take_grads(&mut dgrads, &w_da);
    let d_b_grads = take_grads(&mut dgrads, &w_db);
    drop(dtape);

    state.opt_g_ab.update(&mut state.g_ab.params, &g_ab_grads, lr)?;
    state.opt_g_ba.update(&mut state.g_ba.params, &g_ba_grads, lr)?;
    state.opt_d_a.update(&mut state.d_a.params, &d_a_grads, lr)?;
    state.opt_d_b.update(&mut state.d_b.params, &d_b_grads, lr)?;
    state.progress.iteration += 1;
    Ok(report)
}

/// Augment (optionally), normalize and stack images of one domain.
pub fn make_batch<'a, R: rand::Rng + ?Sized>(
    images: impl IntoIterator<Item = &'a Image>,
    domain: Domain,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<ImageBatch> {
    let mut values = Vec::new();
    let mut norms = Vec::new();
    for image in images {
        let (unit, rec) = if policy.is_identity() {
            to_unit(image)?
        } else {
            to_unit(&augment(image, rng, policy)?)?
        };
        values.push(unit);
        norms.push(rec);
    }
    ImageBatch::new(Tensor::stack_batch(&values)?, domain, norms)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a2b")]
    AToB,
    #[serde(rename = "b2a")]
    BToA,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::AToB => Domain::A,
            Direction::BToA => Domain::B,
        }
    }

    pub fn target(self) -> Domain {
        self.source().other()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::AToB => "a2b",
            Direction::BToA => "b2a",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2b" | "a->b" | "ab" => Ok(Direction::AToB),
            "b2a" | "b->a" | "ba" => Ok(Direction::BToA),
            _ => Err(Error::Config(format!("unknown direction {s:?} (expected a2b or b2a)"))),
        }
    }
}

/// Options of one `train` invocation that do not affect the result.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint directory.
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation (the run stays resumable).
    pub max_epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub mean_total: f64,
    pub best_total: f64,
    pub improved: bool,
    pub transition: Transition,
    pub phase: Phase,
    pub seconds: f64,
}

impl fmt::Display for EpochSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  lr {:.2e}  iters {:>4}  loss {:.4}  best {:.4}{}  {:.1}s",
            self.epoch,
            self.lr,
            self.iterations,
            self.mean_total,
            self.best_total,
            if self.improved { "*" } else { " " },
            self.seconds
        )?;
        match self.transition {
            Transition::Continue => Ok(()),
            Transition::EnterPhase2 => f.write_str("  -> lr decay"),
            Transition::Stop => f.write_str("  -> done"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub progress: Progress,
    pub log: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

fn log_header() -> String {
    LossReport::CSV_HEADER.join(",")
}

/// Keep the header and the rows of iterations before `iterations`.
fn truncate_log(path: &Path, iterations: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(log_header().as_str()) {
        return Err(Error::format(path, "unexpected training-log header"));
    }
    let mut kept = log_header() + "\n";
    for line in lines {
        let iter: usize = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("malformed log row {line:?}")))?;
        if iter < iterations {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Train on the dataset's training split, writing the log and checkpoints into `out`.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
    options: &TrainOptions,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    config.validate()?;
    let data_seed = dataset.manifest.seed;
    let images_a = dataset.load(Domain::A, Split::Train)?;
    let images_b = dataset.load(Domain::B, Split::Train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);

    let mut state = match &options.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            ckpt.manifest.check_compatible(config, data_seed)?;
            let state = ckpt.into_state();
            if log_path.exists() {
                truncate_log(&log_path, state.progress.iteration)?;
            } else {
                fs::write(&log_path, log_header() + "\n").map_err(|e| Error::io(&log_path, e))?;
            }
            state
        }
        None => {
            fs::write(&log_path, log_header() + "\n").map_err(|e| Error::io(&log_path, e))?;
            TrainState::new(config)?
        }
    };
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let last = out.join(LAST_DIR);
    let best = out.join(BEST_DIR);
    let mut ran = 0;
    while state.progress.phase != Phase::Done {
        if options.max_epochs.is_some_and(|m| ran >= m) {
            break;
        }
        let started = Instant::now();
        let epoch = state.progress.epoch;
        let lr = lr_schedule(epoch, config)?;
        let order = unpaired_order(images_a.len(), images_b.len(), &mut state.rng)?;
        let mut rows = String::new();
        let mut sum = 0.0;
        let mut iterations = 0;
        for chunk in order.chunks(config.batch_size) {
            let ba = make_batch(
                chunk.iter().map(|p| &images_a[p.0]),
                Domain::A,
                &config.augment,
                &mut state.rng,
            )?;
            let bb = make_batch(
                chunk.iter().map(|p| &images_b[p.1]),
                Domain::B,
                &config.augment,
                &mut state.rng,
            )?;
            let iter = state.progress.iteration;
            let report = training_step(&mut state, &ba, &bb)?;
            rows.push_str(&report.csv_row(iter, epoch).join(","));
            rows.push('\n');
            sum += report.total;
            iterations += 1;
        }
        log.write_all(rows.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        let mean_total = sum / iterations as f64;
        let decision = early_stop_update(&mut state.progress, config, mean_total);
        ran += 1;
        save_checkpoint(&state, data_seed, &last)?;
        if decision.improved {
            save_checkpoint(&state, data_seed, &best)?;
        }
        if config.checkpoint_every > 0 && state.progress.epochs_completed % config.checkpoint_every == 0 {
            save_checkpoint(&state, data_seed, &out.join(format!("ckpt_epoch_{epoch:03}")))?;
        }
        on_epoch(&EpochSummary {
            epoch,
            lr,
            iterations,
            mean_total,
            best_total: state.progress.best_total_loss,
            improved: decision.improved,
            transition: decision.transition,
            phase: state.progress.phase,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    if !last.exists() {
        save_checkpoint(&state, data_seed, &last)?;
    }
    Ok(TrainOutcome {
        progress: state.progress,
        log: log_path,
        last_checkpoint: last,
        best_checkpoint: best.exists().then_some(best),
    })
}

/// A translated image in the generator range and as z-scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthesized {
    pub unit: Image,
    pub z: Image,
}

/// Translate full-size 2-D images one at a time.
pub fn synthesize(
    checkpoint: &Checkpoint,
    images: &[Image],
    direction: Direction,
    mode: DeformMode,
) -> Result<Vec<Synthesized>> {
    let g = checkpoint.generator(direction)?;
    images
        .iter()
        .map(|image| {
            let (x, rec) = to_unit(image)?;
            let y = crate::networks::generator_forward(g, &x, mode)?;
            let [_, _, h, w] = y.dims4()?;
            let unit: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
            let z = unit.iter().map(|&u| rec.from_unit(u)).collect();
            Ok(Synthesized {
                unit: Tensor::from_vec(&[h, w], unit)?,
                z: Tensor::from_vec(&[h, w], z)?,
            })
        })
        .collect()
}
