//! End-to-end runs: corrupt, detect, correct, segment and score every test
//! case of a phantom corpus, plus one-axis parameter sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artefact::{corrupt_kspace, synthesize_phase, CorruptionRecord, CorruptionSpec, PhaseGenSpec};
use crate::container::{save_complex, save_image, save_mask, save_u8_volume};
use crate::correction::{combine_correction_loss, correct, reconstruction_loss, CorrectionConfig, DEFAULT_GAMMA};
use crate::detection::{
    detection_loss, extract_line_features, line_accuracy, predict_line_probs, threshold_mask, train_detector,
    DetectionModel, LineFeatures, DEFAULT_THRESHOLD,
};
use crate::error::{ensure, Error, Result};
use crate::fft::{fft2, ifft2};
use crate::metrics::{assemble_report, mean_report, write_csv, MetricsReport, ReportContext};
use crate::optim::TrainConfig;
use crate::phantom::{CaseEntry, Dataset, Split};
use crate::rng::{derive_seed, stream};
use crate::segmentation::{segment, segmentation_loss, train_segmenter_scaled, SegModel, SegmentationMap};
use crate::tensor::{ComplexSequence, ImageSequence, KSpace, LineMask};

/// Share of failed cases above which a run counts as failed.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

/// Weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the correction loss; the segmentation loss gets `1 - lambda`.
    pub lambda: f64,
    /// Weight of the detection loss inside the correction loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.8,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda),
            "lambda must lie in [0, 1], got {}",
            self.lambda
        );
        ensure!(
            (0.0..=1.0).contains(&self.gamma),
            "gamma must lie in [0, 1], got {}",
            self.gamma
        );
        Ok(())
    }
}

/// `(1 - lambda) * seg_loss + lambda * corr_loss`.
pub fn total_loss(seg_loss: f64, corr_loss: f64, w: &LossWeights) -> f64 {
    (1.0 - w.lambda) * seg_loss + w.lambda * corr_loss
}

/// Where line masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorSource {
    /// Ground-truth masks from the corruption record.
    Oracle,
    /// Train on the corpus training split.
    Train,
    /// Load parameters saved under this stem.
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterSource {
    /// Train on the clean training split.
    Train,
    Path(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    Z,
    JSigma,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Z => "z",
            SweepAxis::JSigma => "j_sigma",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "z" => Ok(SweepAxis::Z),
            "j_sigma" | "j" => Ok(SweepAxis::JSigma),
            other => Err(Error::validation(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepValues {
    pub lambda_values: Vec<f64>,
    pub z_values: Vec<usize>,
    pub j_sigma_values: Vec<f64>,
}

impl SweepValues {
    pub fn values(&self, axis: SweepAxis) -> Vec<f64> {
        match axis {
            SweepAxis::Lambda => self.lambda_values.clone(),
            SweepAxis::Z => self.z_values.iter().map(|&z| z as f64).collect(),
            SweepAxis::JSigma => self.j_sigma_values.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    pub phase: PhaseGenSpec,
    /// `None` runs on uncorrupted k-space.
    pub corruption: Option<CorruptionSpec>,
    pub detector: DetectorSource,
    pub detector_training: TrainConfig,
    pub threshold: f64,
    pub segmenter: SegmenterSource,
    pub segmenter_training: TrainConfig,
    pub correction: CorrectionConfig,
    pub loss: LossWeights,
    pub sweep: SweepValues,
    /// Compute the sharpness index for every scored sequence.
    pub sharpness: bool,
    /// Write per-case sequences, masks and label maps.
    pub save_cases: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            dataset: PathBuf::from("data"),
            output: PathBuf::from("out"),
            seed: 0,
            phase: PhaseGenSpec::default(),
            corruption: Some(CorruptionSpec::default()),
            detector: DetectorSource::Train,
            detector_training: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            segmenter: SegmenterSource::Train,
            segmenter_training: TrainConfig::default(),
            correction: CorrectionConfig::default(),
            loss: LossWeights::default(),
            sweep: SweepValues::default(),
            sharpness: true,
            save_cases: true,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.run_id.is_empty(), "run_id must not be empty");
        ensure!(
            self.dataset.join(crate::phantom::MANIFEST_FILE).is_file(),
            "dataset {} has no manifest",
            self.dataset.display()
        );
        self.phase.validate()?;
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        if let DetectorSource::Path(p) = &self.detector {
            ensure!(
                crate::container::header_path(p).is_file(),
                "detector model {} not found",
                p.display()
            );
        }
        if let SegmenterSource::Path(p) = &self.segmenter {
            ensure!(
                crate::container::header_path(p).is_file(),
                "segmenter model {} not found",
                p.display()
            );
        }
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            "threshold must lie in (0, 1), got {}",
            self.threshold
        );
        self.detector_training.validate()?;
        self.segmenter_training.validate()?;
        self.correction.validate()?;
        self.loss.validate()
    }

    /// SHA-256 of the configuration with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Per-case loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseLosses {
    pub detection: f64,
    pub reconstruction: f64,
    pub correction: f64,
    pub segmentation: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub corrupted: MetricsReport,
    pub corrected: MetricsReport,
    pub losses: CaseLosses,
    pub corrupted_lines: usize,
    pub flagged_lines: usize,
    pub line_accuracy: f64,
    pub step_size_used: f64,
    pub energy_monotone: bool,
    pub residuals: Vec<f64>,
    pub energies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedCase {
    pub case: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub cases: Vec<CaseReport>,
    pub failed: Vec<FailedCase>,
    pub mean_corrupted: Option<MetricsReport>,
    pub mean_corrected: Option<MetricsReport>,
    pub mean_losses: Option<CaseLosses>,
    /// Mean share of lines actually replaced.
    pub corrupted_fraction: f64,
}

impl RunSummary {
    pub fn failed_fraction(&self) -> f64 {
        let n = self.cases.len() + self.failed.len();
        if n == 0 {
            0.0
        } else {
            self.failed.len() as f64 / n as f64
        }
    }

    pub fn over_failure_threshold(&self) -> bool {
        self.failed_fraction() > MAX_FAILED_FRACTION
    }
}

/// One case after corruption and correction.
struct Processed {
    clean: ImageSequence,
    observed: ImageSequence,
    corrected: ImageSequence,
    corrected_complex: ComplexSequence,
    truth_mask: LineMask,
    probs: Array2<f64>,
    mask: LineMask,
    step_size_used: f64,
    energy_monotone: bool,
    residuals: Vec<f64>,
    energies: Vec<f64>,
}

/// Detector resolved from a [`DetectorSource`].
enum Detector {
    Oracle,
    Model(DetectionModel),
}

fn case_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, index as u64)
}

/// Complex input, acquired k-space, observed image and corruption record of a
/// case. Without corruption the observed sequence is the input itself.
fn acquire(
    cfg: &RunConfig,
    index: usize,
    clean: &ImageSequence,
) -> Result<(KSpace, ComplexSequence, Option<CorruptionRecord>)> {
    let seed = case_seed(cfg, index);
    let phase = PhaseGenSpec {
        rng_seed: derive_seed(seed, stream::PHASE),
        ..cfg.phase.clone()
    };
    let complex = synthesize_phase(clean, &phase)?;
    let ks = fft2(&complex)?;
    match &cfg.corruption {
        None => Ok((ks, complex, None)),
        Some(spec) => {
            let spec = CorruptionSpec {
                rng_seed: derive_seed(seed, stream::CORRUPTION),
                ..spec.clone()
            };
            let (bad, record) = corrupt_kspace(&ks, &spec)?;
            let observed = ifft2(&bad)?;
            Ok((bad, observed, Some(record)))
        }
    }
}

fn truth_mask(ks: &KSpace, record: Option<&CorruptionRecord>) -> LineMask {
    let g = ks.geometry();
    match record {
        Some(r) => r.mask(g.frames, g.lines()),
        None => LineMask::zeros(g.frames, g.lines()),
    }
}

fn process(cfg: &RunConfig, detector: &Detector, index: usize, clean: ImageSequence) -> Result<Processed> {
    let (acquired, observed, record) = acquire(cfg, index, &clean)?;
    let truth = truth_mask(&acquired, record.as_ref());
    let (probs, mask) = match detector {
        Detector::Oracle => (truth.as_f64(), truth.clone()),
        Detector::Model(m) => {
            let p = predict_line_probs(m, &extract_line_features(&acquired))?;
            let mask = threshold_mask(&p, cfg.threshold)?;
            (p, mask)
        }
    };
    let (corrected_complex, step, monotone, residuals, energies) = if mask.count() == 0 {
        // every line is kept, so the projection returns the acquired data
        (observed.clone(), 0.0, true, Vec::new(), Vec::new())
    } else {
        let r = correct(&acquired, &mask, &cfg.correction)?;
        (
            r.corrected,
            r.step_size_used,
            r.energy_monotone,
            r.per_iteration_residuals,
            r.energies,
        )
    };
    Ok(Processed {
        observed: observed.magnitude(),
        corrected: corrected_complex.magnitude(),
        corrected_complex,
        clean,
        truth_mask: truth,
        probs,
        mask,
        step_size_used: step,
        energy_monotone: monotone,
        residuals,
        energies,
    })
}

fn resolve_detector(cfg: &RunConfig, ds: &Dataset) -> Result<Detector> {
    match &cfg.detector {
        DetectorSource::Oracle => Ok(Detector::Oracle),
        DetectorSource::Path(p) => Ok(Detector::Model(DetectionModel::load(p)?)),
        DetectorSource::Train => {
            let train = indexed(ds, Split::Train);
            ensure!(!train.is_empty(), "training split is empty");
            let corpus: Vec<(LineFeatures, LineMask)> = train
                .par_iter()
                .map(|&(i, e)| {
                    let (clean, _) = ds.load(e)?;
                    let (ks, _, record) = acquire(cfg, i, &clean)?;
                    let truth = truth_mask(&ks, record.as_ref());
                    Ok((extract_line_features(&ks), truth))
                })
                .collect::<Result<_>>()?;
            let tc = TrainConfig {
                seed: derive_seed(cfg.seed, stream::DETECTOR),
                ..cfg.detector_training.clone()
            };
            Ok(Detector::Model(train_detector(&corpus, &tc)?.model))
        }
    }
}

/// Which images the segmenter learns from, and the loss scale applied.
#[derive(Clone, Copy)]
enum SegTraining {
    Clean,
    /// Corrected training outputs with the loss scaled by `1 - lambda`.
    Corrected,
}

fn resolve_segmenter(cfg: &RunConfig, ds: &Dataset, detector: &Detector, mode: SegTraining) -> Result<SegModel> {
    match &cfg.segmenter {
        SegmenterSource::Path(p) => SegModel::load(p),
        SegmenterSource::Train => {
            let train = indexed(ds, Split::Train);
            ensure!(!train.is_empty(), "training split is empty");
            let corpus: Vec<(ImageSequence, SegmentationMap)> = train
                .par_iter()
                .map(|&(i, e)| {
                    let (clean, labels) = ds.load(e)?;
                    Ok(match mode {
                        SegTraining::Clean => (clean, labels),
                        SegTraining::Corrected => (process(cfg, detector, i, clean)?.corrected, labels),
                    })
                })
                .collect::<Result<_>>()?;
            let scale = match mode {
                SegTraining::Clean => 1.0,
                SegTraining::Corrected => 1.0 - cfg.loss.lambda,
            };
            let seed = derive_seed(cfg.seed, stream::SEGMENTER);
            let tc = TrainConfig {
                seed,
                ..cfg.segmenter_training.clone()
            };
            Ok(train_segmenter_scaled(SegModel::init(seed), &corpus, &tc, scale)?.model)
        }
    }
}

/// Trains a detector on the training split of `cfg.dataset`, whatever
/// `cfg.detector` says.
pub fn train_detector_for(cfg: &RunConfig) -> Result<DetectionModel> {
    let cfg = RunConfig {
        detector: DetectorSource::Train,
        ..cfg.clone()
    };
    cfg.validate()?;
    match resolve_detector(&cfg, &Dataset::open(&cfg.dataset)?)? {
        Detector::Model(m) => Ok(m),
        Detector::Oracle => unreachable!("training always yields a model"),
    }
}

/// Trains a segmenter on the clean training split of `cfg.dataset`.
pub fn train_segmenter_for(cfg: &RunConfig) -> Result<SegModel> {
    let cfg = RunConfig {
        segmenter: SegmenterSource::Train,
        ..cfg.clone()
    };
    cfg.validate()?;
    resolve_segmenter(
        &cfg,
        &Dataset::open(&cfg.dataset)?,
        &Detector::Oracle,
        SegTraining::Clean,
    )
}

fn indexed(ds: &Dataset, split: Split) -> Vec<(usize, &CaseEntry)> {
    ds.manifest
        .cases
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == split)
        .collect()
}

fn score_case(
    cfg: &RunConfig,
    hash: &str,
    seg: &SegModel,
    id: &str,
    p: &Processed,
    truth_labels: &SegmentationMap,
) -> Result<CaseReport> {
    let ctx = |stage: &str| ReportContext {
        run_id: format!("{}:{id}", cfg.run_id),
        stage: stage.to_string(),
        z: cfg.corruption.as_ref().map(|c| c.z),
        j_sigma: cfg.corruption.as_ref().map(|c| c.offset_sigma),
        lambda: cfg.loss.lambda,
        config_hash: hash.to_string(),
    };
    let (_, observed_labels) = segment(seg, &p.observed)?;
    let (probs, labels) = segment(seg, &p.corrected)?;
    let corrupted = assemble_report(
        &ctx("corrupted"),
        &p.clean,
        &p.observed,
        Some((&observed_labels, truth_labels)),
        cfg.sharpness,
    )?;
    let corrected = assemble_report(
        &ctx("corrected"),
        &p.clean,
        &p.corrected,
        Some((&labels, truth_labels)),
        cfg.sharpness,
    )?;
    let det = detection_loss(&p.probs, &p.truth_mask)?;
    let rec = reconstruction_loss(&p.corrected, &p.clean)?;
    let corr = combine_correction_loss(det, rec, cfg.loss.gamma);
    let segl = segmentation_loss(&probs, truth_labels)?;
    let losses = CaseLosses {
        detection: det,
        reconstruction: rec,
        correction: corr,
        segmentation: segl,
        total: total_loss(segl, corr, &cfg.loss),
    };
    if cfg.save_cases {
        let dir = cfg.output.join("cases").join(id);
        fs::create_dir_all(&dir)?;
        save_complex(&dir.join("corrected"), &p.corrected_complex)?;
        save_mask(&dir.join("mask"), &p.mask)?;
        save_u8_volume(&dir.join("labels"), labels.data())?;
        let scale = p.clean.max();
        let diff = ImageSequence::new((p.corrected.data() - p.clean.data()).mapv(|v| {
            if scale > 0.0 {
                v.abs() / scale
            } else {
                v.abs()
            }
        }))?;
        save_image(&dir.join("difference"), &diff)?;
    }
    let report = CaseReport {
        case: id.to_string(),
        corrupted,
        corrected,
        losses,
        corrupted_lines: p.truth_mask.count(),
        flagged_lines: p.mask.count(),
        line_accuracy: line_accuracy(&p.mask, &p.truth_mask),
        step_size_used: p.step_size_used,
        energy_monotone: p.energy_monotone,
        residuals: p.residuals.clone(),
        energies: p.energies.clone(),
    };
    if cfg.save_cases {
        let path = cfg.output.join("cases").join(id).join("report.json");
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

fn mean_losses(cases: &[CaseReport]) -> Option<CaseLosses> {
    if cases.is_empty() {
        return None;
    }
    let n = cases.len() as f64;
    let m = |f: fn(&CaseLosses) -> f64| cases.iter().map(|c| f(&c.losses)).sum::<f64>() / n;
    Some(CaseLosses {
        detection: m(|l| l.detection),
        reconstruction: m(|l| l.reconstruction),
        correction: m(|l| l.correction),
        segmentation: m(|l| l.segmentation),
        total: m(|l| l.total),
    })
}

/// Runs every test case of the dataset and writes the run directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    run_with(cfg, SegTraining::Clean)
}

fn run_with(cfg: &RunConfig, seg_mode: SegTraining) -> Result<RunSummary> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    let hash = cfg.hash();
    fs::create_dir_all(&cfg.output)?;
    let detector = resolve_detector(cfg, &ds)?;
    let seg = resolve_segmenter(cfg, &ds, &detector, seg_mode)?;
    let tests = indexed(&ds, Split::Test);
    ensure!(!tests.is_empty(), "test split is empty");

    let outcomes: Vec<std::result::Result<(CaseReport, f64), FailedCase>> = tests
        .par_iter()
        .map(|&(i, e)| {
            let attempt = || -> Result<(CaseReport, f64)> {
                let (clean, labels) = ds.load(e)?;
                let p = process(cfg, &detector, i, clean)?;
                let g = p.clean.geometry();
                let fraction = p.truth_mask.count() as f64 / (g.frames * g.lines()) as f64;
                Ok((score_case(cfg, &hash, &seg, &e.id, &p, &labels)?, fraction))
            };
            attempt().map_err(|err| {
                log::warn!("case {} failed: {err}", e.id);
                FailedCase {
                    case: e.id.clone(),
                    error: err.to_string(),
                }
            })
        })
        .collect();

    let mut cases = Vec::new();
    let mut failed = Vec::new();
    let mut fractions = Vec::new();
    for o in outcomes {
        match o {
            Ok((c, f)) => {
                cases.push(c);
                fractions.push(f);
            }
            Err(f) => failed.push(f),
        }
    }
    let corrupted_rows: Vec<MetricsReport> = cases.iter().map(|c| c.corrupted.clone()).collect();
    let corrected_rows: Vec<MetricsReport> = cases.iter().map(|c| c.corrected.clone()).collect();
    let summary = RunSummary {
        run_id: cfg.run_id.clone(),
        config_hash: hash,
        config: cfg.clone(),
        mean_corrupted: mean_report(&corrupted_rows, &cfg.run_id, "corrupted"),
        mean_corrected: mean_report(&corrected_rows, &cfg.run_id, "corrected"),
        mean_losses: mean_losses(&cases),
        corrupted_fraction: if fractions.is_empty() {
            0.0
        } else {
            fractions.iter().sum::<f64>() / fractions.len() as f64
        },
        cases,
        failed,
    };
    write_outputs(cfg, &summary)?;
    Ok(summary)
}

fn write_outputs(cfg: &RunConfig, s: &RunSummary) -> Result<()> {
    let mut rows = Vec::new();
    for c in &s.cases {
        rows.push(c.corrupted.clone());
        rows.push(c.corrected.clone());
    }
    rows.extend(s.mean_corrupted.clone());
    rows.extend(s.mean_corrected.clone());
    write_csv(fs::File::create(cfg.output.join("metrics.csv"))?, &rows)?;

    let mut w = csv::Writer::from_path(cfg.output.join("residuals.csv"))?;
    w.write_record(["case", "iteration", "residual", "energy"])?;
    for c in &s.cases {
        for (k, (r, e)) in c.residuals.iter().zip(&c.energies).enumerate() {
            w.write_record([c.case.clone(), k.to_string(), r.to_string(), e.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cfg.output.join("losses.csv"))?;
    w.write_record([
        "case",
        "detection",
        "reconstruction",
        "correction",
        "segmentation",
        "total",
    ])?;
    for c in &s.cases {
        let l = &c.losses;
        w.write_record([
            c.case.clone(),
            l.detection.to_string(),
            l.reconstruction.to_string(),
            l.correction.to_string(),
            l.segmentation.to_string(),
            l.total.to_string(),
        ])?;
    }
    w.flush()?;

    let mut config = s.config.clone();
    config.output = PathBuf::new();
    let manifest = serde_json::json!({
        "run_id": s.run_id,
        "config_hash": s.config_hash,
        "config": config,
        "cases": s.cases.iter().map(|c| &c.case).collect::<Vec<_>>(),
        "failed": s.failed,
        "failed_fraction": s.failed_fraction(),
        "corrupted_fraction": s.corrupted_fraction,
        "mean_losses": s.mean_losses,
    });
    let mut f = fs::File::create(cfg.output.join("run_manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Aggregate of one sweep value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub corrupted_fraction: f64,
    pub ssim_corrupted: f64,
    pub ssim_corrected: f64,
    pub dice_lv: Option<f64>,
    pub dice_myo: Option<f64>,
    pub dice_rv: Option<f64>,
    pub total_loss: f64,
    pub failed_fraction: f64,
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "axis",
    "value",
    "corrupted_fraction",
    "ssim_corrupted",
    "ssim_corrected",
    "dice_lv",
    "dice_myo",
    "dice_rv",
    "total_loss",
];

fn sweep_value_config(base: &RunConfig, axis: SweepAxis, value: f64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.run_id = format!("{}-{}={value}", base.run_id, axis.name());
    cfg.output = base
        .output
        .join(format!("sweep_{}", axis.name()))
        .join(value.to_string());
    match axis {
        SweepAxis::Lambda => cfg.loss.lambda = value,
        SweepAxis::Z => {
            ensure!(
                value >= 1.0 && value.fract() == 0.0,
                "z values must be positive integers, got {value}"
            );
            cfg.corruption.get_or_insert_with(CorruptionSpec::default).z = value as usize;
        }
        SweepAxis::JSigma => cfg.corruption.get_or_insert_with(CorruptionSpec::default).offset_sigma = value,
    }
    Ok(cfg)
}

/// One full run per value of `axis`, all sharing the base seed. Models that do
/// not depend on the swept value are trained once and reused. Writes
/// `sweep_<axis>.csv` under the base output directory.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    ensure!(
        !values.is_empty(),
        "sweep over {} needs at least one value",
        axis.name()
    );
    base.validate()?;
    let configs = values
        .iter()
        .map(|&v| sweep_value_config(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    let shared = base.output.join(format!("sweep_{}", axis.name()));
    fs::create_dir_all(&shared)?;
    let ds = Dataset::open(&base.dataset)?;
    let mut base = base.clone();
    if axis == SweepAxis::Lambda && base.detector == DetectorSource::Train {
        if let Detector::Model(m) = resolve_detector(&base, &ds)? {
            let stem = shared.join("detector");
            m.save(&stem)?;
            base.detector = DetectorSource::Path(stem);
        }
    }
    if axis != SweepAxis::Lambda && base.segmenter == SegmenterSource::Train {
        let seg = resolve_segmenter(&base, &ds, &Detector::Oracle, SegTraining::Clean)?;
        let stem = shared.join("segmenter");
        seg.save(&stem)?;
        base.segmenter = SegmenterSource::Path(stem);
    }
    let mode = if axis == SweepAxis::Lambda {
        SegTraining::Corrected
    } else {
        SegTraining::Clean
    };
    let mut rows = Vec::with_capacity(values.len());
    for (&value, mut cfg) in values.iter().zip(configs) {
        cfg.detector = base.detector.clone();
        cfg.segmenter = base.segmenter.clone();
        let s = run_with(&cfg, mode)?;
        let (mc, mk) = match (&s.mean_corrupted, &s.mean_corrected) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::validation(format!(
                    "every case failed at {}={value}",
                    axis.name()
                )))
            }
        };
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value,
            corrupted_fraction: s.corrupted_fraction,
            ssim_corrupted: mc.ssim,
            ssim_corrected: mk.ssim,
            dice_lv: mk.dice_lv,
            dice_myo: mk.dice_myo,
            dice_rv: mk.dice_rv,
            total_loss: s.mean_losses.map(|l| l.total).unwrap_or(f64::NAN),
            failed_fraction: s.failed_fraction(),
        });
    }
    write_sweep_csv(&base.output.join(format!("sweep_{}.csv", axis.name())), &rows)?;
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.value.to_string(),
            r.corrupted_fraction.to_string(),
            r.ssim_corrupted.to_string(),
            r.ssim_corrected.to_string(),
            opt(r.dice_lv),
            opt(r.dice_myo),
            opt(r.dice_rv),
            r.total_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
