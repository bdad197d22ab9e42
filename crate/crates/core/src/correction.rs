//! Artefact correction under hard data consistency.
//!
//! Lines flagged clean are kept exactly as acquired; flagged lines are
//! re-estimated by alternating a gradient step on a temporal + spatial
//! regularizer in the image domain with a projection back onto the acquired
//! clean lines. Because the transform is orthonormal and the mask selects
//! whole lines, the projection is an orthogonal projection in image space, so
//! the loop is projected gradient descent on the regularizer.

use ndarray::{s, Array2, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detection::{detection_loss, DetectionLabels};
use crate::error::{ensure, Error, Result};
use crate::fft::Fft2Plan;
use crate::tensor::{ensure_same_geometry, ComplexSequence, ImageSequence, KSpace, LineMask};

/// Smoothing constant of the total-variation term.
pub const TV_DELTA: f64 = 1e-6;
/// Allowed energy increase (relative to `max(1, E)`) before the step is halved.
pub const ENERGY_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_GAMMA: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub iterations: usize,
    pub temporal_weight: f64,
    pub spatial_tv_weight: f64,
    /// Gradient step in units of `1 / (8 * temporal_weight)`, the inverse
    /// Lipschitz constant of the temporal term (plain units when that term is
    /// off).
    pub step_size: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            iterations: 10,
            temporal_weight: 1.0,
            spatial_tv_weight: 0.05,
            step_size: 0.5,
        }
    }
}

impl CorrectionConfig {
    /// Step applied to the image-domain gradient for a sequence of `frames`.
    pub fn effective_step(&self, frames: usize) -> f64 {
        if self.temporal_weight > 0.0 && frames > 1 {
            self.step_size / (8.0 * self.temporal_weight)
        } else {
            self.step_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.iterations >= 1, "iterations must be >= 1");
        ensure!(
            self.temporal_weight.is_finite() && self.temporal_weight >= 0.0,
            "temporal_weight must be finite and >= 0"
        );
        ensure!(
            self.spatial_tv_weight.is_finite() && self.spatial_tv_weight >= 0.0,
            "spatial_tv_weight must be finite and >= 0"
        );
        ensure!(
            self.step_size.is_finite() && self.step_size > 0.0,
            "step_size must be > 0"
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CorrectionResult {
    pub corrected: ComplexSequence,
    pub corrected_kspace: KSpace,
    pub mask_used: LineMask,
    /// Relative misfit on clean lines of each pre-projection estimate.
    pub per_iteration_residuals: Vec<f64>,
    /// Regularizer value after each gradient step (before projection).
    pub energies: Vec<f64>,
    /// Image-domain step actually applied, after any halving.
    pub step_size_used: f64,
    /// Whether `energies` passed the descent check.
    pub energy_monotone: bool,
}

/// Keeps `estimate` on corrupted lines (`mask = 1`) and `acquired` elsewhere.
pub fn hard_data_consistency(estimate: &KSpace, acquired: &KSpace, mask: &LineMask) -> Result<KSpace> {
    ensure_same_geometry(estimate.geometry(), acquired.geometry(), "data consistency")?;
    mask.matches(acquired.geometry())?;
    let mut out = estimate.clone();
    splice_clean_lines(out.data_mut(), acquired.data(), mask);
    Ok(out)
}

fn splice_clean_lines(dst: &mut Array3<Complex64>, acquired: &Array3<Complex64>, mask: &LineMask) {
    let (frames, lines) = mask.dim();
    for t in 0..frames {
        for l in 0..lines {
            if !mask.is_corrupted(t, l) {
                dst.slice_mut(s![t, l, ..]).assign(&acquired.slice(s![t, l, ..]));
            }
        }
    }
}

#[inline]
fn smooth_abs(d: f64) -> f64 {
    (d * d + TV_DELTA * TV_DELTA).sqrt()
}

#[inline]
fn smooth_abs_grad(d: f64) -> f64 {
    d / (d * d + TV_DELTA * TV_DELTA).sqrt()
}

/// `w_t * sum_t |x_t - x_{t-1}|^2` (circular in t) plus `w_tv * TV_smooth(x)`
/// with TV taken over forward differences of real and imaginary parts.
pub fn regularization_energy(x: &Array3<Complex64>, cfg: &CorrectionConfig) -> f64 {
    let (frames, rows, cols) = x.dim();
    let mut temporal = 0.0;
    if cfg.temporal_weight != 0.0 {
        for t in 0..frames {
            let prev = (t + frames - 1) % frames;
            Zip::from(x.slice(s![t, .., ..]))
                .and(x.slice(s![prev, .., ..]))
                .for_each(|a, b| temporal += (a - b).norm_sqr());
        }
    }
    let mut tv = 0.0;
    if cfg.spatial_tv_weight != 0.0 {
        for t in 0..frames {
            for r in 0..rows {
                for c in 0..cols {
                    let v = x[[t, r, c]];
                    if c + 1 < cols {
                        let d = x[[t, r, c + 1]] - v;
                        tv += smooth_abs(d.re) + smooth_abs(d.im);
                    }
                    if r + 1 < rows {
                        let d = x[[t, r + 1, c]] - v;
                        tv += smooth_abs(d.re) + smooth_abs(d.im);
                    }
                }
            }
        }
    }
    cfg.temporal_weight * temporal + cfg.spatial_tv_weight * tv
}

/// Gradient of [`regularization_energy`] with respect to real and imaginary
/// parts, packed as a complex array.
pub fn regularization_gradient(x: &Array3<Complex64>, cfg: &CorrectionConfig) -> Array3<Complex64> {
    let (frames, rows, cols) = x.dim();
    let mut g = Array3::<Complex64>::zeros(x.dim());
    if cfg.temporal_weight != 0.0 && frames > 1 {
        let w = 2.0 * cfg.temporal_weight;
        for t in 0..frames {
            let prev = (t + frames - 1) % frames;
            let next = (t + 1) % frames;
            Zip::from(g.slice_mut(s![t, .., ..]))
                .and(x.slice(s![t, .., ..]))
                .and(x.slice(s![prev, .., ..]))
                .and(x.slice(s![next, .., ..]))
                .for_each(|g, &c, &p, &n| *g += (c * 2.0 - p - n) * w);
        }
    }
    if cfg.spatial_tv_weight != 0.0 {
        let w = cfg.spatial_tv_weight;
        for t in 0..frames {
            for r in 0..rows {
                for c in 0..cols {
                    let v = x[[t, r, c]];
                    if c + 1 < cols {
                        let d = x[[t, r, c + 1]] - v;
                        let p = Complex64::new(smooth_abs_grad(d.re), smooth_abs_grad(d.im)) * w;
                        g[[t, r, c + 1]] += p;
                        g[[t, r, c]] -= p;
                    }
                    if r + 1 < rows {
                        let d = x[[t, r + 1, c]] - v;
                        let p = Complex64::new(smooth_abs_grad(d.re), smooth_abs_grad(d.im)) * w;
                        g[[t, r + 1, c]] += p;
                        g[[t, r, c]] -= p;
                    }
                }
            }
        }
    }
    g
}

/// True when the sequence is non-increasing up to one small violation.
pub fn energy_descends(energies: &[f64]) -> bool {
    let mut violations = 0;
    for w in energies.windows(2) {
        let rise = w[1] - w[0];
        if rise > 0.0 {
            if rise > ENERGY_TOLERANCE * w[0].abs().max(1.0) {
                return false;
            }
            violations += 1;
        }
    }
    violations <= 1
}

struct Run {
    image: Array3<Complex64>,
    kspace: Array3<Complex64>,
    residuals: Vec<f64>,
    energies: Vec<f64>,
}

fn clean_line_residual(est: &Array3<Complex64>, acquired: &Array3<Complex64>, mask: &LineMask) -> f64 {
    let (frames, lines) = mask.dim();
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..frames {
        for l in 0..lines {
            if mask.is_corrupted(t, l) {
                continue;
            }
            Zip::from(est.slice(s![t, l, ..]))
                .and(acquired.slice(s![t, l, ..]))
                .for_each(|e, a| {
                    num += (e - a).norm_sqr();
                    den += a.norm_sqr();
                });
        }
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// Runs the iteration at a fixed step. With `stop_on_rise`, returns `None` as
/// soon as the energy sequence fails [`energy_descends`].
fn run(
    acquired: &KSpace,
    mask: &LineMask,
    cfg: &CorrectionConfig,
    step: f64,
    stop_on_rise: bool,
) -> Result<Option<Run>> {
    let g = acquired.geometry();
    let plan = Fft2Plan::new(g.rows, g.cols);
    let acq = acquired.data().as_standard_layout().to_owned();
    let mut kspace = acq.clone();
    let mut image = acq.clone();
    plan.apply(&mut image, false);

    let mut residuals = Vec::with_capacity(cfg.iterations);
    let mut energies = Vec::with_capacity(cfg.iterations);
    let mut rising = 0;
    let mut best = f64::INFINITY;
    for iteration in 0..cfg.iterations {
        let grad = regularization_gradient(&image, cfg);
        Zip::from(&mut image).and(&grad).for_each(|x, &d| *x -= d * step);
        energies.push(regularization_energy(&image, cfg));
        if stop_on_rise && !energy_descends(&energies) {
            return Ok(None);
        }

        kspace.assign(&image);
        plan.apply(&mut kspace, true);
        let residual = clean_line_residual(&kspace, &acq, mask);
        if !residual.is_finite() {
            return Err(Error::Diverged { iteration, residual });
        }
        if let Some(&last) = residuals.last() {
            rising = if residual > last { rising + 1 } else { 0 };
        }
        if rising >= 3 && best > 0.0 && residual > 10.0 * best {
            return Err(Error::Diverged { iteration, residual });
        }
        best = best.min(residual);
        residuals.push(residual);

        splice_clean_lines(&mut kspace, &acq, mask);
        image.assign(&kspace);
        plan.apply(&mut image, false);
    }
    Ok(Some(Run {
        image,
        kspace,
        residuals,
        energies,
    }))
}

/// Iterative data-consistent correction. If the regularizer fails the descent
/// check at the configured step, the run is abandoned and repeated once from
/// the start with half the step.
pub fn correct(acquired: &KSpace, mask: &LineMask, cfg: &CorrectionConfig) -> Result<CorrectionResult> {
    cfg.validate()?;
    mask.matches(acquired.geometry())?;
    let mut step = cfg.effective_step(acquired.geometry().frames);
    let out = match run(acquired, mask, cfg, step, true)? {
        Some(out) => out,
        None => {
            step *= 0.5;
            log::debug!("regularizer energy rose; retrying with step {step}");
            run(acquired, mask, cfg, step, false)?.expect("run without early stop")
        }
    };
    let monotone = energy_descends(&out.energies);
    if !monotone {
        log::debug!("regularizer energy not monotone at step {step}");
    }
    Ok(CorrectionResult {
        corrected: ComplexSequence::new(out.image)?,
        corrected_kspace: KSpace::new(out.kspace)?,
        mask_used: mask.clone(),
        per_iteration_residuals: out.residuals,
        energies: out.energies,
        step_size_used: step,
        energy_monotone: monotone,
    })
}

/// Mean squared error over all pixels of all frames.
pub fn reconstruction_loss(recon: &ImageSequence, target: &ImageSequence) -> Result<f64> {
    ensure_same_geometry(recon.geometry(), target.geometry(), "reconstruction loss")?;
    let n = recon.geometry().total_pixels() as f64;
    let sum: f64 = Zip::from(recon.data())
        .and(target.data())
        .fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
    Ok(sum / n)
}

/// `gamma * L_detection + (1 - gamma) * L_reconstruction`.
pub fn correction_loss(
    recon: &ImageSequence,
    target: &ImageSequence,
    probs: &Array2<f64>,
    labels: &DetectionLabels,
    gamma: f64,
) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&gamma), "gamma must lie in [0, 1], got {gamma}");
    let det = detection_loss(probs, labels)?;
    let rec = reconstruction_loss(recon, target)?;
    Ok(combine_correction_loss(det, rec, gamma))
}

pub fn combine_correction_loss(detection: f64, reconstruction: f64, gamma: f64) -> f64 {
    gamma * detection + (1.0 - gamma) * reconstruction
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{fft2, ifft2};
    use crate::rng::seeded;
    use crate::tensor::Geometry;
    use rand::Rng;

    fn random_field(shape: (usize, usize, usize), seed: u64) -> Array3<Complex64> {
        let mut rng = seeded(seed);
        Array3::from_shape_simple_fn(shape, || {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn projection_extremes() {
        let g = Geometry::new(3, 6, 5).unwrap();
        let est = KSpace::new(random_field(g.shape(), 1)).unwrap();
        let acq = KSpace::new(random_field(g.shape(), 2)).unwrap();
        let none = hard_data_consistency(&est, &acq, &LineMask::zeros(3, 6)).unwrap();
        assert_eq!(none, acq);
        let all = hard_data_consistency(&est, &acq, &LineMask::ones(3, 6)).unwrap();
        assert_eq!(all, est);
        assert!(hard_data_consistency(&est, &acq, &LineMask::zeros(3, 5)).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = CorrectionConfig {
            temporal_weight: 0.7,
            spatial_tv_weight: 0.3,
            ..Default::default()
        };
        let x = random_field((3, 5, 4), 3);
        let g = regularization_gradient(&x, &cfg);
        let h = 1e-6;
        for &(t, r, c) in &[(0, 0, 0), (1, 2, 3), (2, 4, 1), (0, 3, 2)] {
            for part in 0..2 {
                let bump = |s: f64| {
                    let mut y = x.clone();
                    if part == 0 {
                        y[[t, r, c]].re += s;
                    } else {
                        y[[t, r, c]].im += s;
                    }
                    regularization_energy(&y, &cfg)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = if part == 0 { g[[t, r, c]].re } else { g[[t, r, c]].im };
                assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_mask_is_pure_projection() {
        let g = Geometry::new(4, 8, 8).unwrap();
        let acq = KSpace::new(random_field(g.shape(), 4)).unwrap();
        let res = correct(&acq, &LineMask::zeros(4, 8), &CorrectionConfig::default()).unwrap();
        assert_eq!(res.corrected_kspace, acq);
        assert_eq!(res.corrected, ifft2(&acq).unwrap());
    }

    #[test]
    fn clean_lines_survive_bit_exactly_and_image_matches_kspace() {
        let g = Geometry::new(5, 8, 6).unwrap();
        let acq = KSpace::new(random_field(g.shape(), 5)).unwrap();
        let mask = LineMask::from_fn(5, 8, |t, l| (t + l) % 3 == 0);
        let res = correct(&acq, &mask, &CorrectionConfig::default()).unwrap();
        for t in 0..5 {
            for l in 0..8 {
                if !mask.is_corrupted(t, l) {
                    assert_eq!(res.corrected_kspace.line(t, l), acq.line(t, l));
                }
            }
        }
        let again = fft2(&res.corrected).unwrap();
        for (a, b) in again.data().iter().zip(res.corrected_kspace.data()) {
            assert!((a - b).norm() < 1e-8);
        }
        assert_eq!(res.per_iteration_residuals.len(), 10);
    }

    #[test]
    fn isolated_line_is_filled_with_temporal_average() {
        // temporal term only: one corrupted line between two clean frames
        let g = Geometry::new(3, 4, 4).unwrap();
        let clean = random_field(g.shape(), 6);
        let mut acq = clean.clone();
        acq.slice_mut(s![1, 2, ..]).fill(Complex64::new(5.0, -5.0));
        let mask = LineMask::from_fn(3, 4, |t, l| t == 1 && l == 2);
        let cfg = CorrectionConfig {
            spatial_tv_weight: 0.0,
            step_size: 2.0,
            iterations: 3,
            ..Default::default()
        };
        let res = correct(&KSpace::new(acq).unwrap(), &mask, &cfg).unwrap();
        for c in 0..4 {
            let want = (clean[[0, 2, c]] + clean[[2, 2, c]]) * 0.5;
            assert!((res.corrected_kspace.data()[[1, 2, c]] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let acq = KSpace::zeros(Geometry::new(2, 4, 4).unwrap()).unwrap();
        let m = LineMask::zeros(2, 4);
        for cfg in [
            CorrectionConfig {
                iterations: 0,
                ..Default::default()
            },
            CorrectionConfig {
                step_size: 0.0,
                ..Default::default()
            },
            CorrectionConfig {
                temporal_weight: -1.0,
                ..Default::default()
            },
            CorrectionConfig {
                spatial_tv_weight: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(correct(&acq, &m, &cfg).is_err());
        }
    }

    #[test]
    fn energy_check_rules() {
        assert!(energy_descends(&[3.0, 2.0, 2.0, 1.0]));
        assert!(energy_descends(&[3.0, 2.0, 2.0 + 1e-9, 1.0]));
        assert!(!energy_descends(&[3.0, 2.0, 2.0 + 1e-9, 1.0, 1.0 + 1e-9]));
        assert!(!energy_descends(&[3.0, 2.0, 2.5]));
    }

    #[test]
    fn correction_loss_identities() {
        let g = Geometry::new(1, 4, 4).unwrap();
        let a = ImageSequence::from_fn(g, |(_, r, c)| (r * 4 + c) as f64 / 16.0).unwrap();
        let b = ImageSequence::from_fn(g, |(_, r, c)| (r * 4 + c) as f64 / 16.0 + 0.1).unwrap();
        let probs = Array2::from_elem((1, 4), 0.5);
        let labels = LineMask::from_fn(1, 4, |_, l| l == 0);
        let mse = reconstruction_loss(&a, &b).unwrap();
        assert!((mse - 0.01).abs() < 1e-15);
        let det = detection_loss(&probs, &labels).unwrap();
        assert_eq!(correction_loss(&a, &b, &probs, &labels, 0.0).unwrap(), mse);
        assert_eq!(correction_loss(&a, &b, &probs, &labels, 1.0).unwrap(), det);
        let mixed = correction_loss(&a, &b, &probs, &labels, 0.3).unwrap();
        assert!((mixed - (0.3 * 2f64.ln() + 0.7 * mse)).abs() < 1e-12);
        assert!(correction_loss(&a, &b, &probs, &labels, 1.5).is_err());
    }

    #[test]
    fn spot_value() {
        let v = combine_correction_loss(0.6931, 0.01, 0.3);
        assert!((v - 0.21493).abs() < 1e-12);
    }
}
