//! Parametric beating-heart phantom and on-disk corpora built from it.
//!
//! The LV blood pool is a disc whose radius follows a two-piece cosine cycle
//! (diastole at frame 0, systole at `contraction_phase`), wrapped in a
//! myocardial annulus. The RV is an ellipse with the LV and myocardium carved
//! out of it, so it forms a crescent against the septum. Labels are evaluated
//! analytically at integer pixel coordinates.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{load_image, load_u8_volume, save_image, save_u8_volume};
use crate::error::{ensure, Error, Result};
use crate::rng::{derive_seed, seeded, stream};
use crate::segmentation::{SegmentationMap, NUM_CLASSES};
use crate::tensor::{Geometry, ImageSequence};

/// Minimum distance in pixels between any structure and the frame border.
pub const MARGIN: f64 = 2.0;
pub const MANIFEST_FILE: &str = "manifest.json";
const MAX_JITTER_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    /// (row, col)
    pub lv_center: (f64, f64),
    pub rv_center: (f64, f64),
    /// (systole, diastole)
    pub lv_radius_range: (f64, f64),
    pub myo_thickness: f64,
    /// Semi-axes (row, col) at diastole.
    pub rv_axes: (f64, f64),
    pub contraction_phase: f64,
    /// Base intensity of background, LV, Myo, RV.
    pub intensity_map: [f64; NUM_CLASSES],
    pub texture_sigma: f64,
    pub bias_amplitude: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            frames: 25,
            rows: 176,
            cols: 132,
            lv_center: (88.0, 74.0),
            rv_center: (88.0, 50.0),
            lv_radius_range: (12.0, 20.0),
            myo_thickness: 7.0,
            rv_axes: (34.0, 20.0),
            contraction_phase: 0.45,
            intensity_map: [0.1, 0.9, 0.35, 0.7],
            texture_sigma: 0.03,
            bias_amplitude: 0.05,
            rng_seed: 0,
        }
    }
}

/// Fraction of the RV axes kept at systole.
const RV_SYSTOLIC_SCALE: f64 = 0.8;

impl PhantomSpec {
    /// 32x32, 8 frames.
    pub fn tiny() -> Self {
        PhantomSpec {
            frames: 8,
            rows: 32,
            cols: 32,
            lv_center: (16.0, 18.0),
            rv_center: (16.0, 10.0),
            lv_radius_range: (3.0, 5.0),
            myo_thickness: 2.0,
            rv_axes: (8.0, 5.0),
            ..PhantomSpec::default()
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.frames, self.rows, self.cols)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        let (sys, dia) = self.lv_radius_range;
        ensure!(sys > 0.0 && dia >= sys, "LV radii must satisfy 0 < systole <= diastole");
        ensure!(self.myo_thickness > 0.0, "myocardial thickness must be > 0");
        ensure!(self.rv_axes.0 > 0.0 && self.rv_axes.1 > 0.0, "RV axes must be > 0");
        ensure!(
            self.contraction_phase > 0.0 && self.contraction_phase < 1.0,
            "contraction phase must lie in (0, 1)"
        );
        ensure!(
            self.intensity_map.iter().all(|v| (0.0..=1.0).contains(v)),
            "intensities must lie in [0, 1]"
        );
        ensure!(
            self.texture_sigma >= 0.0 && self.bias_amplitude >= 0.0,
            "texture and bias amplitudes must be >= 0"
        );
        let outer = dia + self.myo_thickness;
        let (h, w) = (self.rows as f64, self.cols as f64);
        let fits = |center: (f64, f64), half: (f64, f64)| {
            center.0 - half.0 >= MARGIN
                && center.0 + half.0 <= h - 1.0 - MARGIN
                && center.1 - half.1 >= MARGIN
                && center.1 + half.1 <= w - 1.0 - MARGIN
        };
        ensure!(
            fits(self.lv_center, (outer, outer)),
            "LV and myocardium leave the frame (margin {MARGIN} px)"
        );
        ensure!(
            fits(self.rv_center, self.rv_axes),
            "RV leaves the frame (margin {MARGIN} px)"
        );
        Ok(())
    }

    /// Cycle position in [0, 1]: 1 at diastole (frame 0), 0 at systole.
    pub fn cycle(&self, frame: usize) -> f64 {
        let phase = frame as f64 / self.frames as f64;
        let s = self.contraction_phase;
        if phase <= s {
            0.5 * (1.0 + (PI * phase / s).cos())
        } else {
            0.5 * (1.0 - (PI * (phase - s) / (1.0 - s)).cos())
        }
    }

    pub fn lv_radius(&self, frame: usize) -> f64 {
        let (sys, dia) = self.lv_radius_range;
        sys + (dia - sys) * self.cycle(frame)
    }

    pub fn rv_axes_at(&self, frame: usize) -> (f64, f64) {
        let k = RV_SYSTOLIC_SCALE + (1.0 - RV_SYSTOLIC_SCALE) * self.cycle(frame);
        (self.rv_axes.0 * k, self.rv_axes.1 * k)
    }

    /// Analytic class of pixel `(row, col)` in `frame`.
    pub fn label_at(&self, frame: usize, row: usize, col: usize) -> u8 {
        let (y, x) = (row as f64, col as f64);
        let r = self.lv_radius(frame);
        let d = ((y - self.lv_center.0).powi(2) + (x - self.lv_center.1).powi(2)).sqrt();
        if d <= r {
            return 1;
        }
        if d <= r + self.myo_thickness {
            return 2;
        }
        let (a, b) = self.rv_axes_at(frame);
        let e = ((y - self.rv_center.0) / a).powi(2) + ((x - self.rv_center.1) / b).powi(2);
        if e <= 1.0 {
            3
        } else {
            0
        }
    }
}

/// Image (normalized to a maximum of 1) and exact labels for one spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ImageSequence, SegmentationMap)> {
    spec.validate()?;
    let g = spec.geometry()?;
    let labels = Array3::from_shape_fn(g.shape(), |(t, r, c)| spec.label_at(t, r, c));

    let mut rng = seeded(derive_seed(spec.rng_seed, stream::PHANTOM));
    let texture = if spec.texture_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.texture_sigma).expect("valid sigma");
        Array2::from_shape_simple_fn((g.rows, g.cols), || normal.sample(&mut rng))
    } else {
        Array2::zeros((g.rows, g.cols))
    };
    let (p1, p2): (f64, f64) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let bias = Array2::from_shape_fn((g.rows, g.cols), |(r, c)| {
        spec.bias_amplitude
            * 0.5
            * ((2.0 * PI * r as f64 / g.rows as f64 + p1).cos() + (2.0 * PI * c as f64 / g.cols as f64 + p2).cos())
    });

    let mut img = Array3::from_shape_fn(g.shape(), |(t, r, c)| {
        (spec.intensity_map[labels[[t, r, c]] as usize] + texture[[r, c]] + bias[[r, c]]).max(0.0)
    });
    let peak = img.fold(0.0f64, |a, &b| a.max(b));
    ensure!(peak > 0.0, "phantom image is identically zero");
    img.mapv_inplace(|v| v / peak);
    Ok((ImageSequence::new(img)?, SegmentationMap::new(labels)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    /// Paths relative to the corpus root, without extension.
    pub image: String,
    pub labels: String,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub template: PhantomSpec,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// `(train, val, test)` sizes for `n` cases.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Radii scaled by up to 20 %, the whole heart shifted by up to 5 px, each
/// intensity moved by up to 0.1; redrawn until the spec is valid.
pub fn jitter_spec(template: &PhantomSpec, seed: u64) -> Result<PhantomSpec> {
    let mut rng = seeded(seed);
    for _ in 0..MAX_JITTER_ATTEMPTS {
        let mut s = template.clone();
        let f_sys = rng.random_range(0.8..=1.2);
        let f_dia = rng.random_range(0.8..=1.2);
        s.lv_radius_range = (template.lv_radius_range.0 * f_sys, template.lv_radius_range.1 * f_dia);
        let (dy, dx) = (rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0));
        s.lv_center = (template.lv_center.0 + dy, template.lv_center.1 + dx);
        s.rv_center = (template.rv_center.0 + dy, template.rv_center.1 + dx);
        for v in s.intensity_map.iter_mut() {
            *v = (*v + rng.random_range(-0.1..=0.1)).clamp(0.0, 1.0);
        }
        s.rng_seed = rng.random();
        if s.validate().is_ok() {
            return Ok(s);
        }
    }
    Err(Error::validation(
        "phantom template leaves no room for jitter inside the frame",
    ))
}

/// Writes `n` jittered phantoms under `root` with a manifest and a
/// deterministic 60/20/20 split.
pub fn generate_corpus(root: &Path, n: usize, template: &PhantomSpec, seed: u64) -> Result<Manifest> {
    ensure!(n >= 1, "corpus needs at least one case");
    template.validate()?;
    let specs: Vec<PhantomSpec> = (0..n)
        .map(|i| jitter_spec(template, derive_seed(seed, stream::PHANTOM.wrapping_add(i as u64))))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(seed, stream::SPLIT)));
    let (train, val, _) = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }

    fs::create_dir_all(root)?;
    let cases: Vec<CaseEntry> = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = case_id(i);
            let (img, labels) = generate_phantom(&spec)?;
            save_image(&root.join(&id).join("image"), &img)?;
            save_u8_volume(&root.join(&id).join("labels"), labels.data())?;
            Ok(CaseEntry {
                image: format!("{id}/image"),
                labels: format!("{id}/labels"),
                id,
                split: splits[i],
                spec,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        seed,
        template: template.clone(),
        cases,
    };
    fs::write(
        root.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// A corpus on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::validation(format!("cannot read {}: {e}", path.display())))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: serde_json::from_str(&text)?,
        })
    }

    pub fn load(&self, entry: &CaseEntry) -> Result<(ImageSequence, SegmentationMap)> {
        let img = load_image(&self.root.join(&entry.image))?;
        let labels = SegmentationMap::new(load_u8_volume(&self.root.join(&entry.labels))?)?;
        ensure!(
            img.geometry().shape() == labels.dim(),
            "{}: image and labels differ in shape",
            entry.id
        );
        Ok((img, labels))
    }

    pub fn split(&self, split: Split) -> Vec<&CaseEntry> {
        self.manifest.split(split).collect()
    }
}
