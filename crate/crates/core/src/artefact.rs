//! Synthetic phase for magnitude-only images and mistriggering artefacts made
//! by copying Cartesian k-space lines between cardiac frames.

use std::sync::OnceLock;

use ndarray::{s, Array3, Zip};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fft::{fft2, ifft2};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{ComplexSequence, ImageSequence, KSpace, LineMask};

/// Recipe for the synthetic phase field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseGenSpec {
    /// Noise standard deviation as a fraction of the image maximum.
    pub noise_sigma: f64,
    /// Fraction of central k-space lines kept unattenuated.
    pub lowpass_keep: f64,
    /// Gaussian taper width (in lines) outside the kept band.
    pub lowpass_taper_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhaseGenSpec {
    fn default() -> Self {
        PhaseGenSpec {
            noise_sigma: 0.01,
            lowpass_keep: 0.125,
            lowpass_taper_sigma: 4.0,
            rng_seed: 0,
        }
    }
}

impl PhaseGenSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            "noise_sigma must be finite and >= 0, got {}",
            self.noise_sigma
        );
        ensure!(
            self.lowpass_keep > 0.0 && self.lowpass_keep <= 1.0,
            "lowpass_keep must lie in (0, 1], got {}",
            self.lowpass_keep
        );
        ensure!(
            self.lowpass_taper_sigma.is_finite() && self.lowpass_taper_sigma > 0.0,
            "lowpass_taper_sigma must be > 0, got {}",
            self.lowpass_taper_sigma
        );
        Ok(())
    }
}

/// Amplitude weight of every k-space line for the phase low-pass filter.
///
/// The central `ceil(keep * rows)` lines, starting at `rows/2 - kept/2`, get
/// weight 1; a line `d` lines outside the band gets `exp(-d^2 / (2 sigma^2))`.
pub fn lowpass_line_weights(rows: usize, keep: f64, taper_sigma: f64) -> Vec<f64> {
    let kept = ((keep * rows as f64).ceil() as usize).clamp(1, rows);
    let start = rows / 2 - kept / 2;
    let end = start + kept;
    (0..rows)
        .map(|l| {
            let d = if l < start {
                start - l
            } else if l >= end {
                l + 1 - end
            } else {
                0
            };
            if d == 0 {
                1.0
            } else {
                let d = d as f64;
                (-d * d / (2.0 * taper_sigma * taper_sigma)).exp()
            }
        })
        .collect()
}

/// The additive white noise field used before filtering, `N(0, (sigma*max)^2)`.
pub fn phase_noise_field(img: &ImageSequence, spec: &PhaseGenSpec) -> Result<Array3<f64>> {
    spec.validate()?;
    let std = spec.noise_sigma * img.max().max(0.0);
    ensure!(
        std.is_finite(),
        "noise_sigma {} yields non-finite noise",
        spec.noise_sigma
    );
    let shape = img.geometry().shape();
    if std == 0.0 {
        return Ok(Array3::zeros(shape));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = seeded(spec.rng_seed);
    Ok(Array3::from_shape_simple_fn(shape, || normal.sample(&mut rng)))
}

/// Smooth phase field `arg(ifft2(lowpass(fft2(img + noise))))`.
pub fn synthetic_phase(img: &ImageSequence, spec: &PhaseGenSpec) -> Result<Array3<f64>> {
    let noise = phase_noise_field(img, spec)?;
    phase_from_noisy(img, &noise, spec)
}

pub(crate) fn phase_from_noisy(img: &ImageSequence, noise: &Array3<f64>, spec: &PhaseGenSpec) -> Result<Array3<f64>> {
    let noisy = ImageSequence::new(img.data() + noise)?;
    let g = img.geometry();
    let weights = lowpass_line_weights(g.rows, spec.lowpass_keep, spec.lowpass_taper_sigma);
    let field = if weights.iter().all(|&w| w == 1.0) {
        // Identity filter: skip the transform pair and its round-off.
        noisy.to_complex()
    } else {
        let ks = fft2(&noisy.to_complex())?;
        let mut data = ks.into_inner();
        for (l, &w) in weights.iter().enumerate() {
            data.slice_mut(s![.., l, ..]).mapv_inplace(|c| c * w);
        }
        ifft2(&KSpace::new(data)?)?
    };
    Ok(field.data().mapv(|c| c.im.atan2(c.re)))
}

/// `mag * exp(i*phase)`, adjusted by at most a few ulps so that `|z| == mag`
/// holds bit-exactly under [`num_complex::Complex::norm`].
fn polar_exact(mag: f64, phase: f64) -> Complex64 {
    if mag == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let (sin, cos) = phase.sin_cos();
    let z = Complex64::new(mag * cos, mag * sin);
    if z.norm() == mag {
        return z;
    }
    // hypot is not correctly rounded, so search a small ulp neighborhood of
    // both components, closest candidates first.
    static OFFSETS: OnceLock<Vec<(i32, i32)>> = OnceLock::new();
    let offsets = OFFSETS.get_or_init(|| {
        const REACH: i32 = 6;
        let mut v: Vec<(i32, i32)> = (-REACH..=REACH)
            .flat_map(|a| (-REACH..=REACH).map(move |b| (a, b)))
            .collect();
        v.sort_by_key(|&(a, b)| (a.abs() + b.abs(), a, b));
        v
    });
    for &(a, b) in offsets {
        let cand = Complex64::new(step_ulps(z.re, a), step_ulps(z.im, b));
        if cand.norm() == mag {
            return cand;
        }
    }
    // Degenerate fallback: put all of the modulus on the real axis.
    Complex64::new(if cos < 0.0 { -mag } else { mag }, 0.0)
}

fn step_ulps(mut v: f64, n: i32) -> f64 {
    for _ in 0..n.unsigned_abs() {
        v = if n > 0 { v.next_up() } else { v.next_down() };
    }
    v
}

/// Attaches a synthetic smooth phase to a magnitude image. The modulus of the
/// result equals `img` exactly.
pub fn synthesize_phase(img: &ImageSequence, spec: &PhaseGenSpec) -> Result<ComplexSequence> {
    ensure!(
        img.data().iter().all(|&v| v >= 0.0),
        "phase synthesis needs a nonnegative magnitude image"
    );
    let phase = synthetic_phase(img, spec)?;
    let mut out = Array3::zeros(img.geometry().shape());
    Zip::from(&mut out)
        .and(img.data())
        .and(&phase)
        .for_each(|o, &m, &p| *o = polar_exact(m, p));
    ComplexSequence::new(out)
}

/// Corruption severity and donor-offset distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// One in `z` lines of every frame is replaced.
    pub z: usize,
    /// Standard deviation (frames) of the Gaussian donor offset `j`.
    pub offset_sigma: f64,
    pub rng_seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            z: 4,
            offset_sigma: 3.0,
            rng_seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.z >= 1, "z must be >= 1, got {}", self.z);
        ensure!(
            self.offset_sigma.is_finite() && self.offset_sigma > 0.0,
            "offset_sigma must be > 0, got {}",
            self.offset_sigma
        );
        Ok(())
    }

    /// Nominal fraction of lines replaced, `1/z`.
    pub fn corrupted_fraction(&self) -> f64 {
        1.0 / self.z as f64
    }
}

/// One replaced line: line `line` of `frame` now holds line `line` of `source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Replacement {
    pub frame: usize,
    pub line: usize,
    pub source: usize,
}

impl From<[usize; 3]> for Replacement {
    fn from([frame, line, source]: [usize; 3]) -> Self {
        Replacement { frame, line, source }
    }
}

impl From<Replacement> for [usize; 3] {
    fn from(r: Replacement) -> Self {
        [r.frame, r.line, r.source]
    }
}

/// Everything [`corrupt_kspace`] changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub z: usize,
    pub offset_sigma: f64,
    pub seed: u64,
    pub entries: Vec<Replacement>,
}

impl CorruptionRecord {
    /// The line mask implied by the record (1 exactly at replaced lines).
    pub fn mask(&self, frames: usize, lines: usize) -> LineMask {
        let mut m = LineMask::zeros(frames, lines);
        for e in &self.entries {
            m.set(e.frame, e.line, true);
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Upper bound on redraws of the donor offset before falling back to a neighbor.
const MAX_DONOR_DRAWS: usize = 10_000;

/// Replaces one in `z` lines of every frame with the same line of a donor frame.
///
/// Per frame `t` a residue `r` is drawn uniformly from `[0, z)` and every line
/// `l = r (mod z)` is replaced. The donor is `clamp(round(t + j), 0, T-1)` with
/// `j ~ N(0, offset_sigma^2)`, redrawn until it differs from `t`. Donor lines
/// always come from the uncorrupted input.
pub fn corrupt_kspace(ks: &KSpace, spec: &CorruptionSpec) -> Result<(KSpace, CorruptionRecord)> {
    spec.validate()?;
    let g = ks.geometry();
    if g.frames < 2 {
        return Err(Error::NoDonorFrame(g.frames));
    }
    let normal = Normal::new(0.0, spec.offset_sigma).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = seeded(spec.rng_seed);
    let last = (g.frames - 1) as f64;

    let mut entries = Vec::new();
    for t in 0..g.frames {
        let residue = rng.random_range(0..spec.z);
        for line in (residue..g.lines()).step_by(spec.z) {
            let mut source = t;
            let mut last_offset = 0.0;
            for _ in 0..MAX_DONOR_DRAWS {
                last_offset = normal.sample(&mut rng);
                source = (t as f64 + last_offset).round().clamp(0.0, last) as usize;
                if source != t {
                    break;
                }
            }
            if source == t {
                source = if (last_offset >= 0.0 && t + 1 < g.frames) || t == 0 {
                    t + 1
                } else {
                    t - 1
                };
            }
            entries.push(Replacement { frame: t, line, source });
        }
    }

    let mut out = ks.clone();
    {
        let data = out.data_mut();
        for e in &entries {
            let donor = ks.line(e.source, e.line);
            data.slice_mut(s![e.frame, e.line, ..]).assign(&donor);
        }
    }
    let record = CorruptionRecord {
        z: spec.z,
        offset_sigma: spec.offset_sigma,
        seed: spec.rng_seed,
        entries,
    };
    Ok((out, record))
}

/// One severity level produced by [`severity_sweep`].
#[derive(Clone, Debug)]
pub struct SeverityLevel {
    pub z: usize,
    pub kspace: KSpace,
    pub record: CorruptionRecord,
}

/// Seed used for severity `z` under a master seed.
pub fn severity_seed(master: u64, z: usize) -> u64 {
    derive_seed(master, z as u64)
}

/// Independent corruptions of `ks`, one per `z`, with per-`z` derived seeds.
pub fn severity_sweep(ks: &KSpace, z_values: &[usize], template: &CorruptionSpec) -> Result<Vec<SeverityLevel>> {
    ensure!(!z_values.is_empty(), "severity sweep needs at least one z value");
    z_values
        .iter()
        .map(|&z| {
            let spec = CorruptionSpec {
                z,
                rng_seed: severity_seed(template.rng_seed, z),
                ..template.clone()
            };
            let (kspace, record) = corrupt_kspace(ks, &spec)?;
            Ok(SeverityLevel { z, kspace, record })
        })
        .collect()
}
