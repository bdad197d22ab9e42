use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kslab::container::{load_image, load_kspace, load_mask, save_complex, save_kspace, save_mask, save_u8_volume};
use kslab::detection::{extract_line_features, predict_line_probs, threshold_mask};
use kslab::pipeline::{train_detector_for, train_segmenter_for, DetectorSource, SegmenterSource};
use kslab::rng::{derive_seed, stream};
use kslab::segmentation::segment;
use kslab::{
    correct, corrupt_kspace, fft2, generate_corpus, run_pipeline, sweep, synthesize_phase, CorruptionSpec,
    DetectionModel, Error, PhantomSpec, RunConfig, SegModel, SweepAxis,
};

const EXIT_RUN_FAILURES: u8 = 3;
const EXIT_VALIDATION: u8 = 2;

#[derive(Parser)]
#[command(
    name = "kslab",
    version,
    about = "Simulate, detect and correct k-space mistriggering artefacts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic phantom corpora.
    Phantom {
        #[command(subcommand)]
        action: PhantomAction,
    },
    /// Attach a synthetic phase to an image and corrupt its k-space.
    Corrupt(CorruptArgs),
    /// Flag corrupted k-space lines.
    Detect(DetectArgs),
    /// Correct flagged lines of a k-space sequence.
    Correct(CorrectArgs),
    /// Segment a magnitude image sequence.
    Segment(SegmentArgs),
    /// Run the full pipeline over the test split of a corpus.
    Run(RunArgs),
    /// Repeat the run over the values of one parameter.
    Sweep(SweepArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum PhantomAction {
    /// Write a corpus with a manifest and train/val/test split.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 32x32 phantoms with 8 frames.
    #[arg(long, conflicts_with = "spec")]
    tiny: bool,
    /// Phantom template as JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Image container stem (path without extension).
    #[arg(long)]
    image: PathBuf,
    /// Output directory for clean and corrupted k-space, mask and record.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    z: usize,
    #[arg(long, default_value_t = 3.0)]
    j_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags shared by every command that takes a run configuration.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dc_iterations: Option<usize>,
    #[arg(long)]
    temporal_weight: Option<f64>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    detector_threshold: Option<f64>,
    /// Train the detector instead of loading one.
    #[arg(long, conflicts_with = "detector")]
    train_detector: bool,
    /// Saved detector model stem.
    #[arg(long)]
    detector: Option<PathBuf>,
    /// Use the true corruption record instead of a detector.
    #[arg(long, conflicts_with_all = ["detector", "train_detector"])]
    oracle_mask: bool,
    /// Train the segmenter instead of loading one.
    #[arg(long, conflicts_with = "seg_model")]
    train_segmenter: bool,
    /// Saved segmenter model stem.
    #[arg(long)]
    seg_model: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.output {
            cfg.output = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.dc_iterations {
            cfg.correction.iterations = v;
        }
        if let Some(v) = self.temporal_weight {
            cfg.correction.temporal_weight = v;
        }
        if let Some(v) = self.tv_weight {
            cfg.correction.spatial_tv_weight = v;
        }
        if let Some(v) = self.step_size {
            cfg.correction.step_size = v;
        }
        if let Some(v) = self.detector_threshold {
            cfg.threshold = v;
        }
        if self.train_detector {
            cfg.detector = DetectorSource::Train;
        }
        if let Some(p) = &self.detector {
            cfg.detector = DetectorSource::Path(p.clone());
        }
        if self.oracle_mask {
            cfg.detector = DetectorSource::Oracle;
        }
        if self.train_segmenter {
            cfg.segmenter = SegmenterSource::Train;
        }
        if let Some(p) = &self.seg_model {
            cfg.segmenter = SegmenterSource::Path(p.clone());
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DetectArgs {
    /// K-space container stem.
    #[arg(long, required_unless_present = "train_detector")]
    kspace: Option<PathBuf>,
    /// Model stem to load, or to write when training.
    #[arg(long)]
    model: PathBuf,
    /// Train on the configured dataset and save to `--model` first.
    #[arg(long)]
    train_detector: bool,
    #[arg(long, default_value_t = 0.5)]
    detector_threshold: f64,
    /// Mask output stem.
    #[arg(long, required_unless_present = "train_detector")]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: TrainingConfigArgs,
}

#[derive(Args)]
struct TrainingConfigArgs {
    /// Run configuration supplying the dataset and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl TrainingConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        ConfigArgs {
            config: self.config.clone(),
            dataset: self.dataset.clone(),
            ..ConfigArgs::default()
        }
        .load()
    }
}

#[derive(Args)]
struct CorrectArgs {
    /// Acquired k-space container stem.
    #[arg(long)]
    kspace: PathBuf,
    /// Line mask container stem.
    #[arg(long)]
    mask: PathBuf,
    /// Output directory for the corrected sequence and residual log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    /// Image container stem.
    #[arg(long, required_unless_present = "train_segmenter")]
    image: Option<PathBuf>,
    /// Model stem to load, or to write when training.
    #[arg(long)]
    seg_model: PathBuf,
    /// Train on the configured dataset and save to `--seg-model` first.
    #[arg(long)]
    train_segmenter: bool,
    /// Label map output stem.
    #[arg(long, required_unless_present = "train_segmenter")]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: TrainingConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// lambda, z or j_sigma.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated values; defaults to the list in the configuration.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run output directory.
    dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("KSLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Validation(format!("KSLAB_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Validation(e.to_string()))
}

fn dispatch(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Phantom {
            action: PhantomAction::Gen(a),
        } => phantom_gen(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Detect(a) => detect(a),
        Command::Correct(a) => correct_cmd(a),
        Command::Segment(a) => segment_cmd(a),
        Command::Run(a) => return run(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Report(a) => report(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn phantom_gen(a: GenArgs) -> Result<(), Error> {
    let template = match (&a.spec, a.tiny) {
        (Some(p), _) => serde_json::from_str(&fs::read_to_string(p)?)?,
        (None, true) => PhantomSpec::tiny(),
        (None, false) => PhantomSpec::default(),
    };
    let m = generate_corpus(&a.out, a.cases, &template, a.seed)?;
    println!("wrote {} cases to {}", m.cases.len(), a.out.display());
    Ok(())
}

fn corrupt(a: CorruptArgs) -> Result<(), Error> {
    let img = load_image(&a.image)?;
    let phase = kslab::PhaseGenSpec {
        noise_sigma: a.noise_sigma,
        rng_seed: derive_seed(a.seed, stream::PHASE),
        ..Default::default()
    };
    phase.validate()?;
    let ks = fft2(&synthesize_phase(&img, &phase)?)?;
    let spec = CorruptionSpec {
        z: a.z,
        offset_sigma: a.j_sigma,
        rng_seed: derive_seed(a.seed, stream::CORRUPTION),
    };
    let (bad, record) = corrupt_kspace(&ks, &spec)?;
    let g = ks.geometry();
    let mask = record.mask(g.frames, g.lines());
    fs::create_dir_all(&a.out)?;
    save_kspace(&a.out.join("clean_kspace"), &ks)?;
    save_kspace(&a.out.join("kspace"), &bad)?;
    save_mask(&a.out.join("mask"), &mask)?;
    fs::write(a.out.join("record.json"), record.to_json()?)?;
    println!("replaced {} of {} lines", mask.count(), g.frames * g.lines());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<(), Error> {
    let model = if a.train_detector {
        let m = train_detector_for(&a.config.load()?)?;
        m.save(&a.model)?;
        println!("saved detector to {}", a.model.display());
        m
    } else {
        DetectionModel::load(&a.model)?
    };
    if let (Some(ks), Some(out)) = (a.kspace, a.out) {
        let ks = load_kspace(&ks)?;
        let probs = predict_line_probs(&model, &extract_line_features(&ks))?;
        let mask = threshold_mask(&probs, a.detector_threshold)?;
        save_mask(&out, &mask)?;
        println!("flagged {} of {} lines", mask.count(), probs.len());
    }
    Ok(())
}

fn correct_cmd(a: CorrectArgs) -> Result<(), Error> {
    let cfg = a.config.load()?.correction;
    let ks = load_kspace(&a.kspace)?;
    let mask = load_mask(&a.mask)?;
    let r = correct(&ks, &mask, &cfg)?;
    fs::create_dir_all(&a.out)?;
    save_complex(&a.out.join("corrected"), &r.corrected)?;
    let mut log = String::from("iteration,residual,energy\n");
    for (k, (res, e)) in r.per_iteration_residuals.iter().zip(&r.energies).enumerate() {
        log.push_str(&format!("{k},{res},{e}\n"));
    }
    fs::write(a.out.join("residuals.csv"), log)?;
    println!(
        "{} iterations, step {}, energy monotone: {}",
        r.per_iteration_residuals.len(),
        r.step_size_used,
        r.energy_monotone
    );
    Ok(())
}

fn segment_cmd(a: SegmentArgs) -> Result<(), Error> {
    let model = if a.train_segmenter {
        let m = train_segmenter_for(&a.config.load()?)?;
        m.save(&a.seg_model)?;
        println!("saved segmenter to {}", a.seg_model.display());
        m
    } else {
        SegModel::load(&a.seg_model)?
    };
    if let (Some(img), Some(out)) = (a.image, a.out) {
        let (_, labels) = segment(&model, &load_image(&img)?)?;
        save_u8_volume(&out, labels.data())?;
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<ExitCode, Error> {
    let cfg = a.config.load()?;
    let s = run_pipeline(&cfg)?;
    print_means(&cfg.output)?;
    for f in &s.failed {
        eprintln!("failed {}: {}", f.case, f.error);
    }
    if s.over_failure_threshold() {
        eprintln!("{} of {} cases failed", s.failed.len(), s.failed.len() + s.cases.len());
        return Ok(ExitCode::from(EXIT_RUN_FAILURES));
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep_cmd(a: SweepArgs) -> Result<(), Error> {
    let cfg = a.config.load()?;
    let values = if a.values.is_empty() {
        cfg.sweep.values(a.axis)
    } else {
        a.values
    };
    sweep(&cfg, a.axis, &values)?;
    print_csv(&cfg.output.join(format!("sweep_{}.csv", a.axis.name())))
}

fn report(a: ReportArgs) -> Result<(), Error> {
    let manifest = a.dir.join("run_manifest.json");
    if manifest.is_file() {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest)?)?;
        let text = |v: &serde_json::Value| v.as_str().unwrap_or_default().to_string();
        println!("run {}  config {}", text(&m["run_id"]), text(&m["config_hash"]));
        println!(
            "cases {}  failed {}  corrupted fraction {}",
            m["cases"].as_array().map_or(0, Vec::len),
            m["failed"].as_array().map_or(0, Vec::len),
            m["corrupted_fraction"]
        );
        if let Some(l) = m["mean_losses"].as_object() {
            let parts: Vec<String> = l
                .iter()
                .map(|(k, v)| format!("{k} {:.4e}", v.as_f64().unwrap_or(f64::NAN)))
                .collect();
            println!("mean losses: {}", parts.join("  "));
        }
        print_means(&a.dir)?;
    }
    let mut sweeps: Vec<PathBuf> = fs::read_dir(&a.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sweep_") && n.ends_with(".csv"))
        })
        .collect();
    sweeps.sort();
    if !manifest.is_file() && sweeps.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no run or sweep output",
            a.dir.display()
        )));
    }
    for p in sweeps {
        println!();
        print_csv(&p)?;
    }
    Ok(())
}

/// Prints the aggregate rows of `metrics.csv`, whose run_id carries no case suffix.
fn print_means(dir: &Path) -> Result<(), Error> {
    let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
    let headers = r.headers()?.clone();
    let rows: Vec<csv::StringRecord> = r
        .records()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|rec| !rec[0].contains(':'))
        .collect();
    print_table(&headers, &rows);
    Ok(())
}

fn print_csv(path: &Path) -> Result<(), Error> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let rows = r.records().collect::<Result<Vec<_>, _>>()?;
    print_table(&headers, &rows);
    Ok(())
}

fn print_table(headers: &csv::StringRecord, rows: &[csv::StringRecord]) {
    let cell = |s: &str| match s.parse::<f64>() {
        Ok(v) if s.contains('.') => format!("{v:.4}"),
        _ => s.to_string(),
    };
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(cell).collect()).collect();
    let widths: Vec<usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| {
            cells
                .iter()
                .map(|r| r.get(i).map_or(0, String::len))
                .fold(h.len(), usize::max)
        })
        .collect();
    let line = |items: Vec<&str>| {
        items
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", line(headers.iter().collect()));
    for r in &cells {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
}
