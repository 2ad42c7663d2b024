//! Evaluation of trained runs and the CycleGAN/Dicycle comparison.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::transform::UNIT_SCALE;
use crate::data::{normalize, write_png8, Dataset, DatasetConfig, Domain, Image, Reference, Split};
use crate::deform::DeformMode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairs, MetricReport, Stat};
use crate::training::{
    load_checkpoint, synthesize, train, Direction, EpochSummary, Phase, TrainConfig, TrainOptions, LAST_DIR,
    MANIFEST_FILE,
};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const MONTAGE_PNG: &str = "montage.png";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";
/// Rows shown in a montage at most.
pub const MONTAGE_ROWS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub direction: Direction,
    pub mode: DeformMode,
    pub nmi_bins: usize,
    /// Checkpoint directory name inside the run directory.
    pub checkpoint: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            direction: Direction::AToB,
            mode: DeformMode::Undeformed,
            nmi_bins: 32,
            checkpoint: LAST_DIR.into(),
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Reference images a translation is scored against.
///
/// Undeformed outputs stay in the source geometry, so they are compared with the
/// target-contrast image in that geometry; deformed outputs are compared with the
/// target domain's own test images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Reference(Reference),
    Domain(Domain),
}

impl GroundTruth {
    pub fn for_run(direction: Direction, mode: DeformMode) -> Self {
        match (direction, mode) {
            (Direction::AToB, DeformMode::Undeformed) => GroundTruth::Reference(Reference::GtBAligned),
            (Direction::BToA, DeformMode::Undeformed) => GroundTruth::Reference(Reference::GtADeformed),
            (d, DeformMode::Deformed) => GroundTruth::Domain(d.target()),
        }
    }

    pub fn name(self) -> String {
        match self {
            GroundTruth::Reference(r) => r.dir().to_string(),
            GroundTruth::Domain(d) => format!("{}/test", d.dir()),
        }
    }

    pub fn load(self, dataset: &Dataset) -> Result<Vec<Image>> {
        match self {
            GroundTruth::Reference(r) => dataset.load_reference(r),
            GroundTruth::Domain(d) => dataset.load(d, Split::Test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub mode: DeformMode,
    pub ground_truth: String,
    pub checkpoint: PathBuf,
    pub n_test: usize,
    /// Predictions replaced by the ground truth (pipeline self-check).
    pub self_test: bool,
    pub metrics: MetricReport,
}

/// Z-scores clipped to the range the generator can represent.
fn target_z(image: &Image) -> Result<Image> {
    let lim = 1.0 / UNIT_SCALE;
    Ok(normalize(image)?.0.map(|v| v.clamp(-lim, lim)))
}

/// Synthesize the test split of the source domain and score it in z-score units.
pub fn evaluate_run(run_dir: &Path, dataset: &Dataset, cfg: &EvalConfig, self_test: bool) -> Result<EvalReport> {
    let ckpt_dir = run_dir.join(&cfg.checkpoint);
    let checkpoint = load_checkpoint(&ckpt_dir)?;
    let sources = dataset.load(cfg.direction.source(), Split::Test)?;
    let gt = GroundTruth::for_run(cfg.direction, cfg.mode);
    let targets: Vec<Image> = gt.load(dataset)?.iter().map(target_z).collect::<Result<_>>()?;
    if targets.len() != sources.len() {
        return Err(Error::Shape(format!(
            "{} source images but {} ground-truth images in {}",
            sources.len(),
            targets.len(),
            gt.name()
        )));
    }
    let preds: Vec<Image> = if self_test {
        targets.clone()
    } else {
        synthesize(&checkpoint, &sources, cfg.direction, cfg.mode)?
            .into_iter()
            .map(|s| s.z)
            .collect()
    };
    let metrics = evaluate_pairs(&preds, &targets, None, cfg.nmi_bins)?;

    let out = eval_dir(run_dir, cfg);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report = EvalReport {
        direction: cfg.direction,
        mode: cfg.mode,
        ground_truth: gt.name(),
        checkpoint: ckpt_dir,
        n_test: sources.len(),
        self_test,
        metrics,
    };
    write_json(&out.join(METRICS_JSON), &report)?;
    write_text(&out.join(METRICS_CSV), &metrics_csv(&report.metrics))?;
    let sources_z: Vec<Image> = sources.iter().map(target_z).collect::<Result<_>>()?;
    write_montage(&out.join(MONTAGE_PNG), &sources_z, &preds, &targets)?;
    Ok(report)
}

/// Where `evaluate_run` writes its files.
pub fn eval_dir(run_dir: &Path, cfg: &EvalConfig) -> PathBuf {
    run_dir.join("eval").join(format!("{}_{}", cfg.direction, cfg.mode))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-volume rows followed by a `mean (std)` aggregate row.
pub fn metrics_csv(m: &MetricReport) -> String {
    let mut s = String::from("volume,mse,psnr,ssim,nmi\n");
    for v in &m.per_volume {
        s.push_str(&format!("{},{},{},{},{}\n", v.index, v.mse, v.psnr, v.ssim, v.nmi));
    }
    s.push_str(&format!(
        "mean (std),{},{},{},{}\n",
        m.mse.cell(),
        m.psnr.cell(),
        m.ssim.cell(),
        m.nmi.cell()
    ));
    s
}

/// Grid of `source | synthesized | ground truth` tiles, one row per test image (up
/// to [`MONTAGE_ROWS`]). Z-scores in `[-4, 4]` map to black..white.
pub fn write_montage(path: &Path, sources: &[Image], preds: &[Image], targets: &[Image]) -> Result<()> {
    let rows = sources.len().min(preds.len()).min(targets.len()).min(MONTAGE_ROWS);
    if rows == 0 {
        return Err(Error::Shape("montage needs at least one image".into()));
    }
    let (h, w) = (sources[0].shape()[0], sources[0].shape()[1]);
    let width = 3 * w;
    let mut px = vec![0.0; rows * h * width];
    for r in 0..rows {
        for (c, img) in [&sources[r], &preds[r], &targets[r]].into_iter().enumerate() {
            if img.shape() != [h, w] {
                return Err(Error::Shape(format!(
                    "montage tile {:?}, expected [{h}, {w}]",
                    img.shape()
                )));
            }
            for y in 0..h {
                for x in 0..w {
                    let v = img.data()[y * w + x];
                    px[(r * h + y) * width + c * w + x] = (v * UNIT_SCALE + 1.0) / 2.0;
                }
            }
        }
    }
    write_png8(path, width, rows * h, &px)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Cycle,
    Dicycle,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::Cycle => "cycle",
            Model::Dicycle => "dicycle",
        }
    }

    /// Training configuration of this model derived from a shared base.
    pub fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        match self {
            Model::Cycle => cfg.into_baseline(),
            Model::Dicycle => {
                cfg.baseline_mode = false;
                cfg
            }
        }
    }
}

impl std::str::FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cycle" | "cyclegan" => Ok(Model::Cycle),
            "dicycle" | "dicyclegan" => Ok(Model::Dicycle),
            _ => Err(Error::Config(format!(
                "unknown model {s:?} (expected dicycle or cycle)"
            ))),
        }
    }
}

/// Per-seed aggregate metrics of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub nmi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: Model,
    pub mse: Stat,
    pub psnr: Stat,
    pub ssim: Stat,
    pub nmi: Stat,
    pub per_seed: Vec<SeedResult>,
}

/// How often Dicycle was strictly better than CycleGAN on the same seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinLoss {
    pub metric: String,
    pub wins: usize,
    pub losses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
    pub code_hash: String,
    pub models: Vec<ModelSummary>,
    pub dicycle_vs_cycle: Vec<WinLoss>,
}

impl ComparisonReport {
    pub fn model(&self, m: Model) -> Option<&ModelSummary> {
        self.models.iter().find(|s| s.model == m)
    }

    pub fn win_loss(&self, metric: &str) -> Option<&WinLoss> {
        self.dicycle_vs_cycle.iter().find(|w| w.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,mse,psnr,ssim,nmi\n");
        for m in &self.models {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                m.model.as_str(),
                m.mse.cell(),
                m.psnr.cell(),
                m.ssim.cell(),
                m.nmi.cell()
            ));
        }
        s.push_str("\nmetric,dicycle_wins,dicycle_losses\n");
        for w in &self.dicycle_vs_cycle {
            s.push_str(&format!("{},{},{}\n", w.metric, w.wins, w.losses));
        }
        s.push_str("\nmodel,seed,mse,psnr,ssim,nmi\n");
        for m in &self.models {
            for r in &m.per_seed {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    m.model.as_str(),
                    r.seed,
                    r.mse,
                    r.psnr,
                    r.ssim,
                    r.nmi
                ));
            }
        }
        s
    }
}

/// Whether `run_dir` holds a finished run of exactly this configuration, code
/// version and dataset.
pub fn finished_run(run_dir: &Path, config: &TrainConfig, data_seed: u64) -> bool {
    let path = run_dir.join(LAST_DIR).join(MANIFEST_FILE);
    let Ok(text) = fs::read_to_string(path) else {
        return false;
    };
    let Ok(m) = serde_json::from_str::<crate::training::CheckpointManifest>(&text) else {
        return false;
    };
    m.progress.phase == Phase::Done
        && m.code_hash == crate::CODE_HASH
        && &m.config == config
        && m.data_seed == data_seed
}

/// Train (or reuse) one run, then evaluate it.
pub fn train_and_evaluate(
    config: &TrainConfig,
    dataset: &Dataset,
    run_dir: &Path,
    eval: &EvalConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary),
) -> Result<EvalReport> {
    if !finished_run(run_dir, config, dataset.manifest.seed) {
        train(config, dataset, run_dir, &TrainOptions::default(), on_epoch)?;
    }
    evaluate_run(run_dir, dataset, eval, false)
}

/// Train both models for every seed on one dataset and tabulate the results.
///
/// Finished runs already present under `out` (same configuration, dataset and code
/// version) are reused instead of retrained.
pub fn compare(
    base: &TrainConfig,
    dataset: &Dataset,
    out: &Path,
    seeds: &[u64],
    eval: &EvalConfig,
    on_epoch: &mut dyn FnMut(Model, u64, &EpochSummary),
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let mut models = Vec::new();
    for model in [Model::Cycle, Model::Dicycle] {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let cfg = model.config(base, seed);
            let run_dir = out.join(model.as_str()).join(format!("seed_{seed}"));
            let report = train_and_evaluate(&cfg, dataset, &run_dir, eval, &mut |s| on_epoch(model, seed, s))?;
            let m = &report.metrics;
            per_seed.push(SeedResult {
                seed,
                run_dir,
                mse: m.mse.mean,
                psnr: m.psnr.mean,
                ssim: m.ssim.mean,
                nmi: m.nmi.mean,
            });
        }
        let stat = |f: fn(&SeedResult) -> f64| Stat::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        models.push(ModelSummary {
            model,
            mse: stat(|r| r.mse),
            psnr: stat(|r| r.psnr),
            ssim: stat(|r| r.ssim),
            nmi: stat(|r| r.nmi),
            per_seed,
        });
    }
    let (cycle, dicycle) = (&models[0].per_seed, &models[1].per_seed);
    let count = |metric: &str, better: fn(&SeedResult, &SeedResult) -> bool| {
        let wins = dicycle.iter().zip(cycle).filter(|(d, c)| better(d, c)).count();
        WinLoss {
            metric: metric.into(),
            wins,
            losses: seeds.len() - wins,
        }
    };
    let dicycle_vs_cycle = vec![
        count("mse", |d, c| d.mse < c.mse),
        count("psnr", |d, c| d.psnr > c.psnr),
        count("ssim", |d, c| d.ssim > c.ssim),
        count("nmi", |d, c| d.nmi > c.nmi),
    ];
    let report = ComparisonReport {
        seeds: seeds.to_vec(),
        eval: eval.clone(),
        code_hash: crate::CODE_HASH.into(),
        models,
        dicycle_vs_cycle,
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(COMPARISON_JSON), &report)?;
    write_text(&out.join(COMPARISON_CSV), &report.to_csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, read_png, PhantomConfig};
    use crate::networks::{DiscriminatorConfig, GeneratorConfig};

    fn tiny(dir: &Path, amplitude: f64) -> Dataset {
        let cfg = DatasetConfig {
            n_train: 3,
            n_test: 10,
            amplitude,
            phantom: PhantomConfig {
                size: 20,
                ..PhantomConfig::default()
            },
            crop: 16,
            ..DatasetConfig::default()
        };
        build_dataset(&cfg, dir).unwrap();
        Dataset::open(dir).unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs_phase1: 1,
            epochs_phase2: 0,
            generator: GeneratorConfig {
                resnet_blocks: 1,
                base_width: 4,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                layers: 3,
                base_width: 4,
                ..DiscriminatorConfig::default()
            },
            augment: crate::data::AugmentPolicy::identity(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ground_truth_mapping() {
        use DeformMode::*;
        assert_eq!(
            GroundTruth::for_run(Direction::AToB, Undeformed),
            GroundTruth::Reference(Reference::GtBAligned)
        );
        assert_eq!(
            GroundTruth::for_run(Direction::BToA, Undeformed),
            GroundTruth::Reference(Reference::GtADeformed)
        );
        assert_eq!(
            GroundTruth::for_run(Direction::AToB, Deformed),
            GroundTruth::Domain(Domain::B)
        );
        assert_eq!(
            GroundTruth::for_run(Direction::BToA, Deformed),
            GroundTruth::Domain(Domain::A)
        );
    }

    #[test]
    fn self_test_gives_perfect_scores_and_montage_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(&dir.path().join("data"), 3.0);
        let run = dir.path().join("run");
        let cfg = tiny_train();
        train(&cfg, &ds, &run, &TrainOptions::default(), &mut |_| {}).unwrap();
        let eval = EvalConfig::default();
        let r = evaluate_run(&run, &ds, &eval, true).unwrap();
        assert_eq!(r.metrics.mse.mean, 0.0);
        assert!((r.metrics.ssim.mean - 1.0).abs() < 1e-12);
        assert_eq!(r.ground_truth, "gt_b_aligned");

        let r = evaluate_run(&run, &ds, &eval, false).unwrap();
        assert!(r.metrics.mse.mean > 0.0);
        let out = eval_dir(&run, &eval);
        let csv = fs::read_to_string(out.join(METRICS_CSV)).unwrap();
        let last = csv.lines().last().unwrap();
        assert!(last.starts_with("mean (std),"));
        let cell = last.split(',').nth(1).unwrap();
        assert!(cell.contains(" (") && cell.ends_with(')'), "{cell}");
        let json: EvalReport = serde_json::from_str(&fs::read_to_string(out.join(METRICS_JSON)).unwrap()).unwrap();
        assert_eq!(json, r);
        let montage = read_png(&out.join(MONTAGE_PNG), [0.0, 1.0]).unwrap();
        assert_eq!(montage.shape(), &[8 * 16, 3 * 16]);
    }

    #[test]
    fn missing_reference_names_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(&dir.path().join("data"), 0.0);
        let run = dir.path().join("run");
        train(&tiny_train(), &ds, &run, &TrainOptions::default(), &mut |_| {}).unwrap();
        fs::remove_dir_all(dir.path().join("data").join("gt_b_aligned")).unwrap();
        let err = evaluate_run(&run, &ds, &EvalConfig::default(), false).unwrap_err();
        assert!(err.to_string().contains("gt_b_aligned"), "{err}");
    }

    #[test]
    fn comparison_accounting_and_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(&dir.path().join("data"), 0.0);
        let out = dir.path().join("cmp");
        let mut epochs = 0;
        let r = compare(
            &tiny_train(),
            &ds,
            &out,
            &[1, 2],
            &EvalConfig::default(),
            &mut |_, _, _| epochs += 1,
        )
        .unwrap();
        assert_eq!(epochs, 4);
        assert!(r.model(Model::Cycle).is_some() && r.model(Model::Dicycle).is_some());
        for w in &r.dicycle_vs_cycle {
            assert_eq!(w.wins + w.losses, 2);
        }
        assert_eq!(r.model(Model::Cycle).unwrap().per_seed.len(), 2);
        let csv = fs::read_to_string(out.join(COMPARISON_CSV)).unwrap();
        assert!(csv.lines().any(|l| l.starts_with("dicycle,2,")));

        let mut again = 0;
        let r2 = compare(
            &tiny_train(),
            &ds,
            &out,
            &[1, 2],
            &EvalConfig::default(),
            &mut |_, _, _| again += 1,
        )
        .unwrap();
        assert_eq!(again, 0);
        assert_eq!(r2.models, r.models);
    }
}
