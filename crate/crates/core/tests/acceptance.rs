//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use kslab::artefact::{corrupt_kspace, severity_sweep, synthesize_phase, CorruptionSpec, PhaseGenSpec};
use kslab::correction::{combine_correction_loss, correct, hard_data_consistency, CorrectionConfig};
use kslab::detection::{
    detection_loss, detection_loss_and_grad, extract_line_features, line_accuracy, predict_line_probs, threshold_mask,
    train_detector, DetectionModel, LineFeatures,
};
use kslab::fft::{fft2, ifft2};
use kslab::metrics::{gaussian_blur, psnr, sharpness_index, ssim};
use kslab::optim::TrainConfig;
use kslab::phantom::{generate_corpus, generate_phantom, jitter_spec, Dataset, PhantomSpec, Split};
use kslab::pipeline::{run_pipeline, total_loss, DetectorSource, LossWeights, RunConfig, SegmenterSource};
use kslab::rng::{derive_seed, seeded, stream};
use kslab::segmentation::{
    dice, segment, segmentation_loss, segmentation_loss_and_grad, train_segmenter, ClassProbabilities, Conv, SegModel,
    SegmentationMap,
};
use kslab::tensor::{ComplexSequence, Geometry, ImageSequence, KSpace, LineMask};
use ndarray::{Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_complex(shape: (usize, usize, usize), seed: u64) -> Array3<Complex64> {
    let mut rng = seeded(seed);
    Array3::from_shape_simple_fn(shape, || {
        Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
}

fn c1_fft_fidelity() -> Outcome {
    let mut rng = seeded(101);
    let (mut worst_trip, mut worst_energy) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let shape = (rng.random_range(1..6), rng.random_range(4..65), rng.random_range(4..65));
        let x = ComplexSequence::new(random_complex(shape, 1000 + i)).unwrap();
        let k = fft2(&x).unwrap();
        let back = ifft2(&k).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            worst_trip = worst_trip.max((a - b).norm());
        }
        let ex: f64 = x.data().iter().map(|z| z.norm_sqr()).sum();
        let ek: f64 = k.data().iter().map(|z| z.norm_sqr()).sum();
        worst_energy = worst_energy.max((ex - ek).abs() / ex);
    }
    outcome(
        worst_trip < 1e-8 && worst_energy < 1e-8,
        format!("round-trip max {worst_trip:.2e}, Parseval max rel {worst_energy:.2e} (tol 1e-8)"),
    )
}

fn c2_corruption_exactness() -> Outcome {
    let g = Geometry::new(25, 176, 132).unwrap();
    let ks = KSpace::new(random_complex(g.shape(), 202)).unwrap();
    let mut problems = Vec::new();
    let mut checked = 0usize;
    for seed in 0..100u64 {
        for z in [2usize, 4, 8, 16, 32] {
            let spec = CorruptionSpec {
                z,
                rng_seed: seed,
                ..CorruptionSpec::default()
            };
            let (out, rec) = corrupt_kspace(&ks, &spec).unwrap();
            let listed = rec.mask(g.frames, g.lines());
            for t in 0..g.frames {
                let changed: Vec<usize> = (0..g.lines()).filter(|&l| out.line(t, l) != ks.line(t, l)).collect();
                let r = changed.first().copied().unwrap_or(usize::MAX);
                // enumeration oracle: every line of the residue class of the first change
                let expected: Vec<usize> = (0..g.lines()).filter(|&l| r < z && l % z == r).collect();
                if changed != expected || listed.count_in_frame(t) != expected.len() {
                    problems.push(format!("seed {seed} z {z} frame {t}"));
                }
                for l in 0..g.lines() {
                    if !listed.is_corrupted(t, l) && out.line(t, l) != ks.line(t, l) {
                        problems.push(format!("seed {seed} z {z} unlisted line {t}/{l} changed"));
                    }
                }
                checked += 1;
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!(
            "{checked} frames checked, {} mismatches{}",
            problems.len(),
            first(&problems)
        ),
    )
}

fn first(v: &[String]) -> String {
    v.first().map(|s| format!(" (first: {s})")).unwrap_or_default()
}

fn c3_data_consistency() -> Outcome {
    let mut rng = seeded(303);
    let mut bad = 0;
    let cases = 300;
    for i in 0..cases {
        let (t, h, w) = (rng.random_range(1..6), rng.random_range(4..40), rng.random_range(4..20));
        let est = KSpace::new(random_complex((t, h, w), 2 * i)).unwrap();
        let acq = KSpace::new(random_complex((t, h, w), 2 * i + 1)).unwrap();
        let mask = if i % 3 == 0 {
            LineMask::from_fn(t, h, |a, b| (a + b) % 2 == 0)
        } else {
            let p = rng.random_range(0.0..1.0);
            LineMask::from_fn(t, h, |_, _| rng.random_bool(p))
        };
        let once = hard_data_consistency(&est, &acq, &mask).unwrap();
        let twice = hard_data_consistency(&once, &acq, &mask).unwrap();
        let mut naive = Array3::zeros((t, h, w));
        for f in 0..t {
            for l in 0..h {
                let src = if mask.is_corrupted(f, l) { &est } else { &acq };
                for c in 0..w {
                    naive[[f, l, c]] = src.data()[[f, l, c]];
                }
            }
        }
        if once != twice || once.data() != &naive {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{cases} masks, {bad} splice or idempotence mismatches (bit-exact)"),
    )
}

fn c4_correction_efficacy() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let cfg = CorrectionConfig::default();
    let template = PhantomSpec::default();
    let rows: Vec<(f64, f64, f64, f64)> = pool.install(|| {
        (0..50u64)
            .map(|i| {
                let seed = derive_seed(404, stream::PHANTOM + i);
                let (clean, _) = generate_phantom(&jitter_spec(&template, seed).unwrap()).unwrap();
                let phase = PhaseGenSpec {
                    rng_seed: derive_seed(seed, stream::PHASE),
                    ..PhaseGenSpec::default()
                };
                let ks = fft2(&synthesize_phase(&clean, &phase).unwrap()).unwrap();
                let spec = CorruptionSpec {
                    rng_seed: derive_seed(seed, stream::CORRUPTION),
                    ..CorruptionSpec::default()
                };
                let (bad, rec) = corrupt_kspace(&ks, &spec).unwrap();
                let g = clean.geometry();
                let observed = ifft2(&bad).unwrap().magnitude();
                let fixed = correct(&bad, &rec.mask(g.frames, g.lines()), &cfg)
                    .unwrap()
                    .corrected
                    .magnitude();
                (
                    psnr(&clean, &observed).unwrap(),
                    psnr(&clean, &fixed).unwrap(),
                    ssim(&clean, &observed).unwrap(),
                    ssim(&clean, &fixed).unwrap(),
                )
            })
            .collect()
    });
    let n = rows.len() as f64;
    let wins = rows.iter().filter(|r| r.1 > r.0).count();
    let mean = |f: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let dssim = mean(|r| r.3) - mean(|r| r.2);
    outcome(
        wins as f64 >= 0.9 * n && dssim >= 0.02,
        format!(
            "PSNR improved on {wins}/50 (need 45), mean PSNR {:.2} -> {:.2} dB, mean SSIM {:.4} -> {:.4} (gain {dssim:.4}, need 0.02)",
            mean(|r| r.0),
            mean(|r| r.1),
            mean(|r| r.2),
            mean(|r| r.3)
        ),
    )
}

fn quick_run(data: &Path, out: &Path) -> RunConfig {
    RunConfig {
        run_id: "acceptance".into(),
        dataset: data.to_path_buf(),
        output: out.to_path_buf(),
        seed: 12,
        detector_training: TrainConfig {
            epochs: 5,
            learning_rate: 1e-2,
            batch_size: 4,
            seed: 0,
        },
        segmenter_training: TrainConfig {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 8,
            seed: 0,
        },
        ..RunConfig::default()
    }
}

fn c5_no_harm() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_corpus(&data, 10, &PhantomSpec::tiny(), 505).unwrap();
    let cfg = RunConfig {
        corruption: None,
        detector: DetectorSource::Oracle,
        ..quick_run(&data, &dir.path().join("out"))
    };
    let s = run_pipeline(&cfg).unwrap();
    let exact = s
        .cases
        .iter()
        .all(|c| c.corrected.mae == 0.0 && c.corrected.ssim == 1.0);
    outcome(
        exact && s.failed.is_empty() && !s.cases.is_empty(),
        format!("{} clean cases, MAE = 0 and SSIM = 1 exactly: {exact}", s.cases.len()),
    )
}

fn seg_layer(m: &mut SegModel, i: usize) -> &mut Conv {
    match i {
        0 => &mut m.enc1,
        1 => &mut m.enc2,
        2 => &mut m.bottleneck,
        3 => &mut m.dec2,
        4 => &mut m.dec1,
        _ => &mut m.head,
    }
}

/// Fourth-order central difference.
fn derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Norm-wise relative error `|fd - an| / max(|fd|, |an|)` of one tensor, and
/// the largest entry-wise absolute difference.
struct TensorCheck {
    name: String,
    rel: f64,
    max_abs: f64,
}

fn compare(name: String, fd: &[f64], an: &[f64]) -> TensorCheck {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut fd.iter().zip(an).map(|(a, b)| a - b));
    let scale = norm(&mut fd.iter().copied()).max(norm(&mut an.iter().copied()));
    TensorCheck {
        name,
        rel: if scale == 0.0 { 0.0 } else { diff / scale },
        max_abs: fd.iter().zip(an).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
    }
}

fn c6_gradient_checks() -> Outcome {
    let h = 1e-5;
    let mut checks = Vec::new();

    // detector on a 2 x 8 x 8 k-space
    let mut rng = seeded(606);
    let ks = KSpace::new(random_complex((2, 8, 8), 607)).unwrap();
    let feats = extract_line_features(&ks);
    let labels = LineMask::from_fn(2, 8, |_, _| rng.random_bool(0.4));
    let mut det = DetectionModel::init(608);
    det.w1.mapv_inplace(|w| w * 0.3);
    det.w2.mapv_inplace(|w| w * 0.3);
    det.b1.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    det.b2 = 0.1;
    let (_, g) = detection_loss_and_grad(&det, &[(&feats, &labels)]).unwrap();
    let loss = |m: &DetectionModel| detection_loss(&predict_line_probs(m, &feats).unwrap(), &labels).unwrap();
    let analytic: [(&str, Vec<f64>); 4] = [
        ("w1", g.w1.iter().copied().collect()),
        ("b1", g.b1.to_vec()),
        ("w2", g.w2.to_vec()),
        ("b2", vec![g.b2]),
    ];
    for (k, (name, an)) in analytic.iter().enumerate() {
        let fd: Vec<f64> = (0..an.len())
            .map(|idx| {
                derivative(
                    |s| {
                        let mut m = det.clone();
                        match k {
                            0 => m.w1.as_slice_mut().unwrap()[idx] += s,
                            1 => m.b1[idx] += s,
                            2 => m.w2[idx] += s,
                            _ => m.b2 += s,
                        }
                        loss(&m)
                    },
                    h,
                )
            })
            .collect();
        checks.push(compare(format!("detector.{name}"), &fd, an));
    }

    // segmenter on an 8 x 8, T = 2 sequence
    let mut seg = SegModel::init(609);
    for i in 0..6 {
        seg_layer(&mut seg, i)
            .bias
            .mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let img = ImageSequence::from_fn(Geometry::new(2, 8, 8).unwrap(), |_| rng.random_range(0.0..1.0)).unwrap();
    let truth = SegmentationMap::new(Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(0..4u8))).unwrap();
    let batch: Vec<_> = (0..2)
        .map(|t| (img.frame(t), truth.data().index_axis(Axis(0), t)))
        .collect();
    let (_, mut sg) = segmentation_loss_and_grad(&seg, &batch, 1.0).unwrap();
    let eval = |m: &SegModel| segmentation_loss(&segment(m, &img).unwrap().0, &truth).unwrap();
    let names = ["enc1", "enc2", "bottleneck", "dec2", "dec1", "head"];
    for li in 0..6 {
        let gl = seg_layer(&mut sg, li).clone();
        for is_bias in [false, true] {
            let an: Vec<f64> = if is_bias {
                gl.bias.to_vec()
            } else {
                gl.weight.iter().copied().collect()
            };
            let fd: Vec<f64> = (0..an.len())
                .map(|idx| {
                    derivative(
                        |s| {
                            let mut m = seg.clone();
                            let c = seg_layer(&mut m, li);
                            if is_bias {
                                c.bias[idx] += s;
                            } else {
                                c.weight.as_slice_mut().unwrap()[idx] += s;
                            }
                            eval(&m)
                        },
                        h,
                    )
                })
                .collect();
            let part = if is_bias { "bias" } else { "weight" };
            checks.push(compare(format!("segmenter.{}.{part}", names[li]), &fd, &an));
        }
    }
    let worst = checks.iter().max_by(|a, b| a.rel.total_cmp(&b.rel)).unwrap();
    let max_abs = checks.iter().map(|c| c.max_abs).fold(0.0, f64::max);
    outcome(
        checks.iter().all(|c| c.rel < 1e-4),
        format!(
            "{} tensors, worst norm-wise rel err {:.2e} ({}) (tol 1e-4), largest entry abs diff {max_abs:.1e}",
            checks.len(),
            worst.rel,
            worst.name
        ),
    )
}

/// Corrupted lines carry six times the amplitude of their neighbours.
fn loud_line_case(seed: u64) -> (LineFeatures, LineMask) {
    let mut rng = seeded(seed);
    let mut data = random_complex((6, 16, 8), seed);
    let mask = LineMask::from_fn(6, 16, |_, _| rng.random_bool(0.2));
    for ((t, l, _), v) in data.indexed_iter_mut() {
        if mask.is_corrupted(t, l) {
            *v *= 6.0;
        }
    }
    (extract_line_features(&KSpace::new(data).unwrap()), mask)
}

fn c7_detector_trainability() -> Outcome {
    let train: Vec<_> = (0..16).map(|i| loud_line_case(700 + i)).collect();
    let held: Vec<_> = (0..16).map(|i| loud_line_case(800 + i)).collect();
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 1e-2,
        batch_size: 4,
        seed: 7,
    };
    let model = train_detector(&train, &cfg).unwrap().model;
    let acc = held
        .iter()
        .map(|(f, l)| {
            line_accuracy(
                &threshold_mask(&predict_line_probs(&model, f).unwrap(), 0.5).unwrap(),
                l,
            )
        })
        .sum::<f64>()
        / held.len() as f64;
    outcome(acc >= 0.95, format!("held-out line accuracy {acc:.4} (need 0.95)"))
}

fn c8_segmenter_trainability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_corpus(&data, 40, &PhantomSpec::tiny(), 808).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let load = |s| ds.split(s).into_iter().map(|e| ds.load(e).unwrap()).collect::<Vec<_>>();
    let train = load(Split::Train);
    let test = load(Split::Test);
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 1e-3,
        batch_size: 10,
        seed: 8,
    };
    let model = train_segmenter(&train, &cfg).unwrap().model;
    let mut clean_dice = [0.0; 3];
    for (img, truth) in &test {
        let (_, pred) = segment(&model, img).unwrap();
        for c in 0..3 {
            clean_dice[c] += dice(&pred, truth, c as u8 + 1).unwrap() / test.len() as f64;
        }
    }
    let stem = dir.path().join("segmenter");
    model.save(&stem).unwrap();
    let run = RunConfig {
        detector: DetectorSource::Oracle,
        segmenter: SegmenterSource::Path(stem),
        sharpness: false,
        save_cases: false,
        ..quick_run(&data, &dir.path().join("out"))
    };
    let s = run_pipeline(&run).unwrap();
    let (mc, mk) = (s.mean_corrupted.unwrap(), s.mean_corrected.unwrap());
    let corrupted = [mc.dice_lv.unwrap(), mc.dice_myo.unwrap(), mc.dice_rv.unwrap()];
    let corrected = [mk.dice_lv.unwrap(), mk.dice_myo.unwrap(), mk.dice_rv.unwrap()];
    let trained = clean_dice[0] >= 0.90 && clean_dice[1] >= 0.80 && clean_dice[2] >= 0.80;
    let helps = (0..3).all(|c| corrected[c] > corrupted[c]);
    outcome(
        trained && helps && s.failed.is_empty(),
        format!(
            "held-out Dice LV/Myo/RV {:.4}/{:.4}/{:.4} (need .90/.80/.80); corrupted {:.4}/{:.4}/{:.4} vs corrected {:.4}/{:.4}/{:.4}",
            clean_dice[0], clean_dice[1], clean_dice[2], corrupted[0], corrupted[1], corrupted[2], corrected[0],
            corrected[1], corrected[2]
        ),
    )
}

fn c9_loss_algebra() -> Outcome {
    let mut rng = seeded(909);
    let labels = LineMask::from_fn(3, 16, |_, _| rng.random_bool(0.5));
    let det = detection_loss(&Array2::from_elem((3, 16), 0.5), &labels).unwrap();
    let uniform = ClassProbabilities::new(Array4::from_elem((2, 8, 8, 4), 0.25)).unwrap();
    let truth = SegmentationMap::new(Array3::from_shape_simple_fn((2, 8, 8), || rng.random_range(0..4u8))).unwrap();
    let seg = segmentation_loss(&uniform, &truth).unwrap();
    let (s, c) = (1.3863, 0.21493);
    let mut ok = (det - 2f64.ln()).abs() < 1e-12 && (seg - 4f64.ln()).abs() < 1e-12;
    ok &= total_loss(
        s,
        c,
        &LossWeights {
            lambda: 0.0,
            gamma: 0.3,
        },
    ) == s;
    ok &= total_loss(
        s,
        c,
        &LossWeights {
            lambda: 1.0,
            gamma: 0.3,
        },
    ) == c;
    ok &= combine_correction_loss(0.6931, 0.01, 0.0) == 0.01;
    ok &= combine_correction_loss(0.6931, 0.01, 1.0) == 0.6931;
    ok &= (combine_correction_loss(0.6931, 0.01, 0.3) - 0.21493).abs() < 1e-12;
    ok &= (total_loss(s, c, &LossWeights::default()) - 0.449204).abs() < 1e-12;
    outcome(
        ok,
        format!(
            "detection loss at p=0.5 off ln2 by {:.1e}, segmentation loss at uniform off ln4 by {:.1e}, degenerate weights exact",
            (det - 2f64.ln()).abs(),
            (seg - 4f64.ln()).abs()
        ),
    )
}

fn c10_severity() -> Outcome {
    let zs = [32usize, 16, 8, 4, 2];
    let mut sums = [0.0; 5];
    let n = 20;
    for i in 0..n {
        let seed = derive_seed(1010, i);
        let (clean, _) = generate_phantom(&jitter_spec(&PhantomSpec::default(), seed).unwrap()).unwrap();
        let phase = PhaseGenSpec {
            rng_seed: derive_seed(seed, stream::PHASE),
            ..PhaseGenSpec::default()
        };
        let ks = fft2(&synthesize_phase(&clean, &phase).unwrap()).unwrap();
        let template = CorruptionSpec {
            rng_seed: derive_seed(seed, stream::CORRUPTION),
            ..CorruptionSpec::default()
        };
        for (k, level) in severity_sweep(&ks, &zs, &template).unwrap().iter().enumerate() {
            sums[k] += ssim(&clean, &ifft2(&level.kspace).unwrap().magnitude()).unwrap() / n as f64;
        }
    }
    let rises: Vec<f64> = sums.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.005);
    let trail: Vec<String> = zs.iter().zip(&sums).map(|(z, s)| format!("z={z}:{s:.4}")).collect();
    outcome(
        ok,
        format!(
            "mean corrupted SSIM over {n} sequences {}; {} rises",
            trail.join(" "),
            rises.len()
        ),
    )
}

fn c11_sharpness() -> Outcome {
    let mut wins = 0;
    let n = 20;
    let mut deterministic = true;
    for i in 0..n {
        let spec = PhantomSpec {
            frames: 4,
            ..jitter_spec(&PhantomSpec::default(), derive_seed(1111, i)).unwrap()
        };
        let (sharp, _) = generate_phantom(&spec).unwrap();
        let blurred = gaussian_blur(&sharp, 1.5).unwrap();
        let a = sharpness_index(&sharp).unwrap();
        let b = sharpness_index(&blurred).unwrap();
        if a.value > b.value {
            wins += 1;
        }
        if i < 3 {
            deterministic &= sharpness_index(&sharp).unwrap() == a;
        }
    }
    outcome(
        wins == n && deterministic,
        format!("sharp beats blurred on {wins}/{n} pairs, repeat evaluation identical: {deterministic}"),
    )
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_corpus(&data, 10, &PhantomSpec::tiny(), 1212).unwrap();
    let a = quick_run(&data, &dir.path().join("a"));
    let b = quick_run(&data, &dir.path().join("b"));
    run_pipeline(&a).unwrap();
    run_pipeline(&b).unwrap();
    let (x, y) = (
        std::fs::read(a.output.join("metrics.csv")).unwrap(),
        std::fs::read(b.output.join("metrics.csv")).unwrap(),
    );
    outcome(
        x == y && !x.is_empty(),
        format!(
            "two runs with trained detector and segmenter: aggregate CSVs {} bytes, identical: {}",
            x.len(),
            x == y
        ),
    )
}

type Criterion = (u32, &'static str, f64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "FFT fidelity", 10.0, c1_fft_fidelity),
        (2, "corruption exactness", 30.0, c2_corruption_exactness),
        (3, "hard data consistency", 5.0, c3_data_consistency),
        (4, "correction efficacy", 300.0, c4_correction_efficacy),
        (5, "no harm on clean input", 60.0, c5_no_harm),
        (6, "gradient checks", 60.0, c6_gradient_checks),
        (7, "detector trainability", 120.0, c7_detector_trainability),
        (8, "segmenter trainability", 600.0, c8_segmenter_trainability),
        (9, "loss algebra", 1.0, c9_loss_algebra),
        (10, "severity monotonicity", 180.0, c10_severity),
        (11, "sharpness ordering", 60.0, c11_sharpness),
        (12, "determinism", 120.0, c12_determinism),
    ];
    let only: Vec<u32> = std::env::var("KSLAB_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (id, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (
                false,
                format!(
                    "panicked: {}",
                    e.downcast_ref::<String>()
                        .cloned()
                        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                ),
            ),
        };
        let in_time = secs <= budget;
        let ok = pass && in_time;
        if !ok {
            failures += 1;
        }
        println!(
            "{} [{id:>2}] {name}: {detail}; {secs:.1} s (budget {budget} s{})",
            if ok { "PASS" } else { "FAIL" },
            if in_time { "" } else { ", exceeded" }
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
