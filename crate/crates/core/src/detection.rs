//! Per-line corruption detection.
//!
//! Every Cartesian line of every frame gets a probability of being corrupted.
//! The model is a small perceptron over six hand-built line statistics; its
//! output contract (a `T x H` probability map thresholded into a [`LineMask`])
//! is what the correction stage consumes.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::optim::{load_params, save_params, Adam, NamedTensor, TrainConfig};
use crate::rng::seeded;
use crate::tensor::{KSpace, LineMask};

/// Number of per-line features.
pub const FEATURE_COUNT: usize = 6;
/// Hidden width of the perceptron.
pub const HIDDEN_UNITS: usize = 16;
/// Probability clamp used by the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Corruption labels use the line-mask convention (1 = corrupted).
pub type DetectionLabels = LineMask;

/// Standardized per-line features, `T x H x F`.
///
/// Feature order: line energy, log-energy, max magnitude, L1 difference to the
/// previous frame's line, L1 difference to the next frame's line, normalized
/// line index.
#[derive(Clone, Debug, PartialEq)]
pub struct LineFeatures(Array3<f64>);

impl LineFeatures {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        ensure!(
            data.dim().2 == FEATURE_COUNT,
            "line features need {FEATURE_COUNT} channels, got {}",
            data.dim().2
        );
        ensure!(data.iter().all(|v| v.is_finite()), "line features must be finite");
        Ok(LineFeatures(data))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    /// `(frames, lines)`.
    pub fn dim(&self) -> (usize, usize) {
        let (t, h, _) = self.0.dim();
        (t, h)
    }
}

/// Raw (unstandardized) line statistics.
pub fn raw_line_features(ks: &KSpace) -> Array3<f64> {
    let g = ks.geometry();
    let data = ks.data();
    let denom = (g.lines() - 1).max(1) as f64;
    let mut out = Array3::zeros((g.frames, g.lines(), FEATURE_COUNT));
    for t in 0..g.frames {
        let prev = t.saturating_sub(1);
        let next = (t + 1).min(g.frames - 1);
        for l in 0..g.lines() {
            let line = ks.line(t, l);
            let energy: f64 = line.iter().map(|c| c.norm_sqr()).sum();
            let max_mag = line.iter().map(|c| c.norm()).fold(0.0, f64::max);
            let diff = |other: usize| -> f64 {
                line.iter()
                    .zip(data.slice(ndarray::s![other, l, ..]))
                    .map(|(a, b)| (a - b).norm())
                    .sum()
            };
            let f = [
                energy,
                (energy + 1e-12).ln(),
                max_mag,
                diff(prev),
                diff(next),
                l as f64 / denom,
            ];
            for (k, v) in f.into_iter().enumerate() {
                out[[t, l, k]] = v;
            }
        }
    }
    out
}

/// Per-sequence standardization of each feature (population statistics).
/// A feature with no spread is set to zero.
fn standardize(raw: &mut Array3<f64>) {
    let n = (raw.dim().0 * raw.dim().1) as f64;
    for k in 0..FEATURE_COUNT {
        let mut col = raw.index_axis_mut(Axis(2), k);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1e-300) || std == 0.0 {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| (v - mean) / std);
        }
    }
}

pub fn extract_line_features(ks: &KSpace) -> LineFeatures {
    let mut raw = raw_line_features(ks);
    standardize(&mut raw);
    LineFeatures(raw)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-layer perceptron: `sigmoid(w2 . relu(W1^T f + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionModel {
    /// `F x HIDDEN_UNITS`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

/// Gradients with the same layout as [`DetectionModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

const MODEL_KIND: &str = "detection_model";

impl DetectionModel {
    pub fn zeros() -> Self {
        DetectionModel {
            w1: Array2::zeros((FEATURE_COUNT, HIDDEN_UNITS)),
            b1: Array1::zeros(HIDDEN_UNITS),
            w2: Array1::zeros(HIDDEN_UNITS),
            b2: 0.0,
        }
    }

    /// Weights drawn from N(0, 1), biases zero.
    pub fn init(seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        DetectionModel {
            w1: Array2::from_shape_simple_fn((FEATURE_COUNT, HIDDEN_UNITS), &mut draw),
            b1: Array1::zeros(HIDDEN_UNITS),
            w2: Array1::from_shape_simple_fn(HIDDEN_UNITS, &mut draw),
            b2: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.w1.dim() == (FEATURE_COUNT, HIDDEN_UNITS)
                && self.b1.len() == HIDDEN_UNITS
                && self.w2.len() == HIDDEN_UNITS,
            "detection model has wrong tensor shapes"
        );
        ensure!(
            self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite()) && self.b2.is_finite(),
            "detection model has non-finite weights"
        );
        Ok(())
    }

    /// Probability that a line with features `f` is corrupted, plus the hidden
    /// pre-activations for backprop.
    fn forward_line(&self, f: &[f64], pre: &mut [f64; HIDDEN_UNITS]) -> f64 {
        let mut z = self.b2;
        for j in 0..HIDDEN_UNITS {
            let mut a = self.b1[j];
            for (i, fi) in f.iter().enumerate() {
                a += fi * self.w1[[i, j]];
            }
            pre[j] = a;
            z += a.max(0.0) * self.w2[j];
        }
        sigmoid(z)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "w1".into(),
                shape: vec![FEATURE_COUNT, HIDDEN_UNITS],
                values: self.w1.iter().copied().collect(),
            },
            NamedTensor {
                name: "b1".into(),
                shape: vec![HIDDEN_UNITS],
                values: self.b1.to_vec(),
            },
            NamedTensor {
                name: "w2".into(),
                shape: vec![HIDDEN_UNITS],
                values: self.w2.to_vec(),
            },
            NamedTensor {
                name: "b2".into(),
                shape: vec![1],
                values: vec![self.b2],
            },
        ]
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_params(stem, MODEL_KIND, &self.to_tensors())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ts = load_params(stem, MODEL_KIND)?;
        let get = |name: &str| -> Result<Vec<f64>> {
            ts.iter()
                .find(|t| t.name == name)
                .map(|t| t.values.clone())
                .ok_or_else(|| Error::validation(format!("detection model lacks tensor {name}")))
        };
        let model = DetectionModel {
            w1: Array2::from_shape_vec((FEATURE_COUNT, HIDDEN_UNITS), get("w1")?)
                .map_err(|e| Error::validation(e.to_string()))?,
            b1: Array1::from(get("b1")?),
            w2: Array1::from(get("w2")?),
            b2: *get("b2")?.first().ok_or_else(|| Error::validation("empty b2"))?,
        };
        model.validate()?;
        Ok(model)
    }
}

/// `T x H` corruption probabilities in `(0, 1)`.
pub fn predict_line_probs(model: &DetectionModel, feats: &LineFeatures) -> Result<Array2<f64>> {
    model.validate()?;
    let (t, h) = feats.dim();
    let mut pre = [0.0; HIDDEN_UNITS];
    let mut out = Array2::zeros((t, h));
    for ((ti, li), p) in out.indexed_iter_mut() {
        let f = feats.0.slice(ndarray::s![ti, li, ..]);
        *p = model.forward_line(f.as_slice().expect("contiguous features"), &mut pre);
    }
    Ok(out)
}

/// `mask = probs >= threshold`.
pub fn threshold_mask(probs: &Array2<f64>, threshold: f64) -> Result<LineMask> {
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie in (0, 1), got {threshold}"
    );
    LineMask::new(probs.mapv(|p| (p >= threshold) as u8))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy over all `T*H` lines, with `probs` read as
/// P(corrupted) and labels 1 = corrupted.
pub fn detection_loss(probs: &Array2<f64>, labels: &DetectionLabels) -> Result<f64> {
    ensure!(
        probs.dim() == labels.dim(),
        "probabilities {:?} and labels {:?} differ in shape",
        probs.dim(),
        labels.dim()
    );
    let n = probs.len() as f64;
    let sum: f64 = probs
        .iter()
        .zip(labels.data())
        .map(|(&p, &k)| {
            let p = clamp_prob(p);
            if k == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / n)
}

/// Loss and analytic gradients over a batch of sequences; the loss is the mean
/// over every line in the batch.
pub fn detection_loss_and_grad(
    model: &DetectionModel,
    batch: &[(&LineFeatures, &DetectionLabels)],
) -> Result<(f64, DetectionGradients)> {
    let total: usize = batch.iter().map(|(f, _)| f.dim().0 * f.dim().1).sum();
    ensure!(total > 0, "empty detection batch");
    let n = total as f64;
    let mut g = DetectionGradients {
        w1: Array2::zeros((FEATURE_COUNT, HIDDEN_UNITS)),
        b1: Array1::zeros(HIDDEN_UNITS),
        w2: Array1::zeros(HIDDEN_UNITS),
        b2: 0.0,
    };
    let mut loss = 0.0;
    let mut pre = [0.0; HIDDEN_UNITS];
    for (feats, labels) in batch {
        ensure!(
            feats.dim() == labels.dim(),
            "features {:?} and labels {:?} differ in shape",
            feats.dim(),
            labels.dim()
        );
        let (t, h) = feats.dim();
        for ti in 0..t {
            for li in 0..h {
                let fv = feats.0.slice(ndarray::s![ti, li, ..]);
                let f = fv.as_slice().expect("contiguous features");
                let p = model.forward_line(f, &mut pre);
                let k = labels.is_corrupted(ti, li);
                let pc = clamp_prob(p);
                loss -= if k { pc.ln() } else { (1.0 - pc).ln() };
                if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                    continue;
                }
                let dz = (p - if k { 1.0 } else { 0.0 }) / n;
                g.b2 += dz;
                for j in 0..HIDDEN_UNITS {
                    g.w2[j] += dz * pre[j].max(0.0);
                    if pre[j] > 0.0 {
                        let dh = dz * model.w2[j];
                        g.b1[j] += dh;
                        for (i, fi) in f.iter().enumerate() {
                            g.w1[[i, j]] += dh * fi;
                        }
                    }
                }
            }
        }
    }
    Ok((loss / n, g))
}

/// A trained detector and its per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct TrainedDetector {
    pub model: DetectionModel,
    pub loss_trace: Vec<f64>,
}

/// Trains a detector from `DetectionModel::init(cfg.seed)`; batches are groups
/// of `batch_size` sequences, visited in a seeded random order each epoch.
pub fn train_detector(corpus: &[(LineFeatures, DetectionLabels)], cfg: &TrainConfig) -> Result<TrainedDetector> {
    train_detector_from(DetectionModel::init(cfg.seed), corpus, cfg)
}

pub fn train_detector_from(
    mut model: DetectionModel,
    corpus: &[(LineFeatures, DetectionLabels)],
    cfg: &TrainConfig,
) -> Result<TrainedDetector> {
    ensure!(!corpus.is_empty(), "detector training corpus is empty");
    cfg.validate()?;
    let mut rng = seeded(cfg.seed ^ 0xD37EC7);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut lines = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&corpus[i].0, &corpus[i].1)).collect();
            let (loss, g) = detection_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            let n: usize = batch.iter().map(|(f, _)| f.dim().0 * f.dim().1).sum();
            weighted += loss * n as f64;
            lines += n;
            adam.begin_step();
            adam.update(
                0,
                model.w1.as_slice_mut().expect("contiguous"),
                g.w1.as_slice().expect("contiguous"),
            );
            adam.update(
                1,
                model.b1.as_slice_mut().expect("contiguous"),
                g.b1.as_slice().expect("contiguous"),
            );
            adam.update(
                2,
                model.w2.as_slice_mut().expect("contiguous"),
                g.w2.as_slice().expect("contiguous"),
            );
            adam.update(3, std::slice::from_mut(&mut model.b2), &[g.b2]);
        }
        trace.push(weighted / lines as f64);
    }
    Ok(TrainedDetector {
        model,
        loss_trace: trace,
    })
}

/// Fraction of lines where `mask` agrees with `labels`.
pub fn line_accuracy(mask: &LineMask, labels: &DetectionLabels) -> f64 {
    let agree = mask.data().iter().zip(labels.data()).filter(|(a, b)| a == b).count();
    agree as f64 / mask.data().len().max(1) as f64
}
