//! Image-quality and overlap metrics, and the per-run report rows.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{ensure, Result};
use crate::fft::Fft2Plan;
use crate::rng::{derive_seed, seeded};
use crate::segmentation::{dice, Class, SegmentationMap};
use crate::tensor::{ensure_same_geometry, ImageSequence};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SI_SURROGATES: usize = 64;
pub const SI_SEED: u64 = 0x51_5EED;

/// Column names of the aggregate CSV, in order.
pub const CSV_COLUMNS: [&str; 12] = [
    "run_id", "stage", "z", "j_sigma", "lambda", "mae", "psnr", "ssim", "si", "dice_lv", "dice_myo", "dice_rv",
];

/// Mean absolute difference over every pixel of every frame.
pub fn mae(x: &ImageSequence, y: &ImageSequence) -> Result<f64> {
    ensure_same_geometry(x.geometry(), y.geometry(), "mae")?;
    let sum = Zip::from(x.data())
        .and(y.data())
        .fold(0.0, |acc, a, b| acc + (a - b).abs());
    Ok(sum / x.geometry().total_pixels() as f64)
}

pub fn mse(x: &ImageSequence, y: &ImageSequence) -> Result<f64> {
    ensure_same_geometry(x.geometry(), y.geometry(), "mse")?;
    let sum = Zip::from(x.data())
        .and(y.data())
        .fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
    Ok(sum / x.geometry().total_pixels() as f64)
}

/// `20 log10(max(truth)) - 10 log10(MSE)`; `+inf` when the images agree.
pub fn psnr(truth: &ImageSequence, y: &ImageSequence) -> Result<f64> {
    let err = mse(truth, y)?;
    let peak = truth.max();
    ensure!(peak > 0.0, "psnr needs a ground truth with positive maximum");
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * peak.log10() - 10.0 * err.log10())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: SSIM_WINDOW,
            sigma: SSIM_SIGMA,
            dynamic_range: 1.0,
        }
    }
}

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection of index `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable filtering of one frame with symmetric boundary handling.
fn filter_frame(x: ArrayView2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * x[[y, reflect(c as isize + k as isize - r, w)]];
            }
            tmp[[y, c]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect(y as isize + k as isize - r, h), c]];
            }
            out[[y, c]] = acc;
        }
    }
    out
}

/// Per-frame Gaussian blur, kernel radius `ceil(3 sigma)`, symmetric boundaries.
pub fn gaussian_blur(img: &ImageSequence, sigma: f64) -> Result<ImageSequence> {
    ensure!(sigma.is_finite() && sigma > 0.0, "blur sigma must be > 0");
    let kernel = gaussian_kernel(2 * (3.0 * sigma).ceil() as usize + 1, sigma);
    let mut out = img.data().clone();
    for (t, mut frame) in out.outer_iter_mut().enumerate() {
        frame.assign(&filter_frame(img.frame(t), &kernel));
    }
    ImageSequence::new(out)
}

pub fn ssim(x: &ImageSequence, y: &ImageSequence) -> Result<f64> {
    ssim_with(x, y, &SsimConfig::default())
}

/// Mean of the per-pixel SSIM map over all pixels and frames.
pub fn ssim_with(x: &ImageSequence, y: &ImageSequence, cfg: &SsimConfig) -> Result<f64> {
    let g = x.geometry();
    ensure_same_geometry(g, y.geometry(), "ssim")?;
    ensure!(cfg.window % 2 == 1, "ssim window must be odd");
    ensure!(
        cfg.window <= g.rows && cfg.window <= g.cols,
        "ssim window {} exceeds image size {}x{}",
        cfg.window,
        g.rows,
        g.cols
    );
    ensure!(cfg.dynamic_range > 0.0, "dynamic range must be > 0");
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (0.01 * cfg.dynamic_range).powi(2);
    let c2 = (0.03 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    for t in 0..g.frames {
        let (a, b) = (x.frame(t), y.frame(t));
        let mx = filter_frame(a, &kernel);
        let my = filter_frame(b, &kernel);
        let xx = filter_frame((&a * &a).view(), &kernel);
        let yy = filter_frame((&b * &b).view(), &kernel);
        let xy = filter_frame((&a * &b).view(), &kernel);
        Zip::from(&mx)
            .and(&my)
            .and(&xx)
            .and(&yy)
            .and(&xy)
            .for_each(|&mx, &my, &xx, &yy, &xy| {
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
            });
    }
    Ok(total / g.total_pixels() as f64)
}

/// Anisotropic total variation with periodic boundaries.
pub fn total_variation(x: ArrayView2<f64>) -> f64 {
    let (h, w) = x.dim();
    let mut tv = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = x[[r, c]];
            tv += (x[[r, (c + 1) % w]] - v).abs() + (x[[(r + 1) % h, c]] - v).abs();
        }
    }
    tv
}

/// `-log10` of the standard normal upper tail at `z`.
pub fn neg_log10_upper_tail(z: f64) -> f64 {
    if z > 30.0 {
        // Q(z) ~ phi(z)/z * (1 - 1/z^2 + 3/z^4)
        let z2 = z * z;
        let ln_q = -0.5 * z2 - (z * (2.0 * std::f64::consts::PI).sqrt()).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln();
        -ln_q / std::f64::consts::LN_10
    } else {
        -(0.5 * erfc(z / std::f64::consts::SQRT_2)).log10()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessIndex {
    /// Mean over frames.
    pub value: f64,
    pub per_frame: Vec<f64>,
    /// Frames with no TV spread among surrogates; scored 0.
    pub degenerate_frames: Vec<usize>,
}

pub fn sharpness_index(x: &ImageSequence) -> Result<SharpnessIndex> {
    sharpness_index_with(x, SI_SURROGATES, SI_SEED)
}

/// Per frame: `-log10 Q((mu - TV) / sigma)` where `mu`, `sigma` are the mean
/// and standard deviation of TV over random-phase surrogates that keep the
/// frame's Fourier magnitudes.
pub fn sharpness_index_with(x: &ImageSequence, surrogates: usize, seed: u64) -> Result<SharpnessIndex> {
    ensure!(surrogates >= 2, "need at least two surrogates");
    let g = x.geometry();
    let plan = Fft2Plan::new(g.rows, g.cols);
    let n = g.pixels_per_frame();
    let mut per_frame = Vec::with_capacity(g.frames);
    let mut degenerate = Vec::new();
    for t in 0..g.frames {
        let frame = x.frame(t);
        let tv = total_variation(frame);
        let mut spectrum: Vec<Complex64> = frame.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        plan.forward_frame(&mut spectrum);
        let mut rng = seeded(derive_seed(seed, t as u64));
        let mut tvs = Vec::with_capacity(surrogates);
        let mut noise = vec![Complex64::new(0.0, 0.0); n];
        for _ in 0..surrogates {
            for v in noise.iter_mut() {
                *v = Complex64::new(StandardNormal.sample(&mut rng), 0.0);
            }
            plan.forward_frame(&mut noise);
            for (v, s) in noise.iter_mut().zip(&spectrum) {
                let norm = v.norm();
                *v = if norm > 0.0 {
                    *v / norm * s.norm()
                } else {
                    Complex64::new(s.norm(), 0.0)
                };
            }
            plan.inverse_frame(&mut noise);
            let surrogate = Array2::from_shape_fn((g.rows, g.cols), |(r, c)| noise[r * g.cols + c].re);
            tvs.push(total_variation(surrogate.view()));
        }
        let m = surrogates as f64;
        let mu = tvs.iter().sum::<f64>() / m;
        let sd = (tvs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m).sqrt();
        if sd <= 1e-12 * mu.abs().max(1e-300) {
            log::warn!("sharpness index undefined for frame {t}: surrogate TV has no spread");
            degenerate.push(t);
            per_frame.push(0.0);
        } else {
            per_frame.push(neg_log10_upper_tail((mu - tv) / sd));
        }
    }
    let value = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(SharpnessIndex {
        value,
        per_frame,
        degenerate_frames: degenerate,
    })
}

/// One row of the aggregate report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub stage: String,
    pub z: Option<usize>,
    pub j_sigma: Option<f64>,
    pub lambda: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub si: Option<f64>,
    pub dice_lv: Option<f64>,
    pub dice_myo: Option<f64>,
    pub dice_rv: Option<f64>,
    pub config_hash: String,
}

/// Run metadata copied into every row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportContext {
    pub run_id: String,
    pub stage: String,
    pub z: Option<usize>,
    pub j_sigma: Option<f64>,
    pub lambda: f64,
    pub config_hash: String,
}

/// Scores `candidate` against `clean`; Dice is filled in when a predicted and
/// a true label map are supplied.
pub fn assemble_report(
    ctx: &ReportContext,
    clean: &ImageSequence,
    candidate: &ImageSequence,
    segmentation: Option<(&SegmentationMap, &SegmentationMap)>,
    with_sharpness: bool,
) -> Result<MetricsReport> {
    let si = if with_sharpness {
        Some(sharpness_index(candidate)?.value)
    } else {
        None
    };
    let (dice_lv, dice_myo, dice_rv) = match segmentation {
        Some((pred, truth)) => (
            Some(dice(pred, truth, Class::Lv.id())?),
            Some(dice(pred, truth, Class::Myo.id())?),
            Some(dice(pred, truth, Class::Rv.id())?),
        ),
        None => (None, None, None),
    };
    Ok(MetricsReport {
        run_id: ctx.run_id.clone(),
        stage: ctx.stage.clone(),
        z: ctx.z,
        j_sigma: ctx.j_sigma,
        lambda: ctx.lambda,
        mae: mae(clean, candidate)?,
        psnr: psnr(clean, candidate)?,
        ssim: ssim(clean, candidate)?,
        si,
        dice_lv,
        dice_myo,
        dice_rv,
        config_hash: ctx.config_hash.clone(),
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_record(&self) -> [String; 12] {
        [
            self.run_id.clone(),
            self.stage.clone(),
            opt(self.z),
            opt(self.j_sigma),
            self.lambda.to_string(),
            self.mae.to_string(),
            self.psnr.to_string(),
            self.ssim.to_string(),
            opt(self.si),
            opt(self.dice_lv),
            opt(self.dice_myo),
            opt(self.dice_rv),
        ]
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

/// Column-wise mean of the numeric fields; optional columns average over the
/// rows where they are present.
pub fn mean_report(rows: &[MetricsReport], run_id: &str, stage: &str) -> Option<MetricsReport> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Some(MetricsReport {
        run_id: run_id.to_string(),
        stage: stage.to_string(),
        z: first.z,
        j_sigma: first.j_sigma,
        lambda: first.lambda,
        mae: mean(&|r| r.mae),
        psnr: mean(&|r| r.psnr),
        ssim: mean(&|r| r.ssim),
        si: mean_opt(&|r| r.si),
        dice_lv: mean_opt(&|r| r.dice_lv),
        dice_myo: mean_opt(&|r| r.dice_myo),
        dice_rv: mean_opt(&|r| r.dice_rv),
        config_hash: first.config_hash.clone(),
    })
}
