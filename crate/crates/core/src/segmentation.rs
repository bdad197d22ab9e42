//! Four-class per-pixel segmentation with a small encoder-decoder network.
//!
//! Each frame is segmented independently from its magnitude. The network has
//! two pooling stages, a bottleneck, and two nearest-neighbour upsampling
//! stages that concatenate the matching encoder activations before their
//! convolution. Convolutions are computed as im2col followed by a matrix
//! product.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::optim::{load_params, save_params, Adam, NamedTensor, TrainConfig};
use crate::rng::seeded;
use crate::tensor::{Geometry, ImageSequence};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "LV", "Myo", "RV"];
/// Channel widths of enc1, enc2, bottleneck, dec2, dec1.
pub const CHANNELS: [usize; 5] = [8, 16, 32, 16, 8];
pub const PROB_EPS: f64 = 1e-7;
const MODEL_KIND: &str = "segmentation_model";

#[repr(u8)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class {
    Background = 0,
    Lv = 1,
    Myo = 2,
    Rv = 3,
}

impl Class {
    pub const FOREGROUND: [Class; 3] = [Class::Lv, Class::Myo, Class::Rv];

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// Label field `T x H x W` with values in `0..4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap(Array3<u8>);

impl SegmentationMap {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        ensure!(
            labels.iter().all(|&v| (v as usize) < NUM_CLASSES),
            "label values must lie in 0..{NUM_CLASSES}"
        );
        Ok(SegmentationMap(labels.as_standard_layout().into_owned()))
    }

    pub fn zeros(geometry: Geometry) -> Self {
        SegmentationMap(Array3::zeros(geometry.shape()))
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<u8> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn count(&self, class: u8) -> usize {
        self.0.iter().filter(|&&v| v == class).count()
    }
}

/// Per-pixel class probabilities, `T x H x W x 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities(Array4<f64>);

impl ClassProbabilities {
    pub fn new(probs: Array4<f64>) -> Result<Self> {
        ensure!(
            probs.dim().3 == NUM_CLASSES,
            "last axis must have {NUM_CLASSES} classes"
        );
        for px in probs.lanes(Axis(3)) {
            let sum: f64 = px.sum();
            ensure!(
                px.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() <= 1e-6,
                "class probabilities must be non-negative and sum to 1"
            );
        }
        Ok(ClassProbabilities(probs))
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    /// Argmax per pixel; ties go to the lower class index.
    pub fn labels(&self) -> SegmentationMap {
        let (t, h, w, _) = self.0.dim();
        SegmentationMap(Array3::from_shape_fn((t, h, w), |(ti, y, x)| {
            argmax(self.0.slice(s![ti, y, x, ..]).iter().copied())
        }))
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> u8 {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best as u8
}

/// Softmax of each column of a `4 x N` logit matrix.
pub fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// A convolution stored as a `c_out x (c_in * k * k)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

impl Conv {
    fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Conv {
            weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            bias: Array1::zeros(c_out),
            kernel,
        }
    }

    fn he(c_in: usize, c_out: usize, kernel: usize, rng: &mut impl rand::Rng) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid sigma");
        let mut c = Conv::zeros(c_in, c_out, kernel);
        c.weight.mapv_inplace(|_| normal.sample(rng));
        c
    }

    pub fn c_in(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }

    fn columns(&self, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        if self.kernel == 1 {
            x.clone()
        } else {
            im2col(x.view(), h, w)
        }
    }

    fn apply(&self, cols: &Array2<f64>) -> Array2<f64> {
        let mut out = self.weight.dot(cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(&self.bias) {
            row += b;
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward(&self, cols: &Array2<f64>, dout: &Array2<f64>, grad: &mut Conv, h: usize, w: usize) -> Array2<f64> {
        grad.weight += &dout.dot(&cols.t());
        grad.bias += &dout.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(dout);
        if self.kernel == 1 {
            dcols
        } else {
            col2im(&dcols, h, w)
        }
    }
}

fn im2col(x: ArrayView2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c_in = x.nrows();
    let mut cols = Array2::zeros((c_in * 9, h * w));
    for ci in 0..c_in {
        let src = x.row(ci);
        let src = src.as_slice().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let mut dst = cols.row_mut(ci * 9 + ky * 3 + kx);
                let dst = dst.as_slice_mut().expect("contiguous rows");
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let srow = (sy - 1) * w;
                    for xx in x0..x1 {
                        dst[y * w + xx] = src[srow + xx + kx - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let c_in = cols.nrows() / 9;
    let mut out = Array2::zeros((c_in, h * w));
    for ci in 0..c_in {
        let mut dst = out.row_mut(ci);
        let dst = dst.as_slice_mut().expect("contiguous rows");
        for ky in 0..3 {
            for kx in 0..3 {
                let src = cols.row(ci * 9 + ky * 3 + kx);
                let src = src.as_slice().expect("contiguous rows");
                let x0 = if kx == 0 { 1 } else { 0 };
                let x1 = if kx == 2 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let srow = (sy - 1) * w;
                    for xx in x0..x1 {
                        dst[srow + xx + kx - 1] += src[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

fn relu(mut x: Array2<f64>) -> Array2<f64> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

fn relu_backward(out: &Array2<f64>, mut d: Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(&mut d).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    d
}

/// 2x2 max pooling; returns pooled maps and the flat source index of each max.
fn max_pool(x: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let c = x.nrows();
    let mut out = Array2::zeros((c, ho * wo));
    let mut idx = vec![0; c * ho * wo];
    for ci in 0..c {
        let src = x.row(ci);
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = (2 * y) * w + 2 * xx;
                for cand in [best + 1, best + w, best + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out[[ci, y * wo + xx]] = src[best];
                idx[ci * ho * wo + y * wo + xx] = best;
            }
        }
    }
    (out, idx)
}

fn max_pool_backward(d: &Array2<f64>, idx: &[usize], h: usize, w: usize) -> Array2<f64> {
    let c = d.nrows();
    let n = d.ncols();
    let mut out = Array2::zeros((c, h * w));
    for ci in 0..c {
        for j in 0..n {
            out[[ci, idx[ci * n + j]]] += d[[ci, j]];
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of maps of size `h x w`.
fn upsample(x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    Array2::from_shape_fn((x.nrows(), ho * wo), |(c, p)| {
        let (y, xx) = (p / wo, p % wo);
        x[[c, (y / 2) * w + xx / 2]]
    })
}

fn upsample_backward(d: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let wo = 2 * w;
    let mut out = Array2::zeros((d.nrows(), h * w));
    for c in 0..d.nrows() {
        for (p, &v) in d.row(c).iter().enumerate() {
            let (y, xx) = (p / wo, p % wo);
            out[[c, (y / 2) * w + xx / 2]] += v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub enc1: Conv,
    pub enc2: Conv,
    pub bottleneck: Conv,
    pub dec2: Conv,
    pub dec1: Conv,
    pub head: Conv,
}

struct Trace {
    h: usize,
    w: usize,
    cols1: Array2<f64>,
    a1: Array2<f64>,
    pool1: Vec<usize>,
    cols2: Array2<f64>,
    a2: Array2<f64>,
    pool2: Vec<usize>,
    cols3: Array2<f64>,
    a3: Array2<f64>,
    cols4: Array2<f64>,
    a4: Array2<f64>,
    cols5: Array2<f64>,
    a5: Array2<f64>,
    logits: Array2<f64>,
}

impl SegModel {
    fn layout(mut make: impl FnMut(usize, usize, usize) -> Conv) -> Self {
        let [c1, c2, c3, c4, c5] = CHANNELS;
        SegModel {
            enc1: make(1, c1, 3),
            enc2: make(c1, c2, 3),
            bottleneck: make(c2, c3, 3),
            dec2: make(c3 + c2, c4, 3),
            dec1: make(c4 + c1, c5, 3),
            head: make(c5, NUM_CLASSES, 1),
        }
    }

    pub fn zeros() -> Self {
        Self::layout(Conv::zeros)
    }

    /// He-normal weights and zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self::layout(|i, o, k| Conv::he(i, o, k, &mut rng))
    }

    fn layers(&self) -> [(&'static str, &Conv); 6] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("bottleneck", &self.bottleneck),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
            ("head", &self.head),
        ]
    }

    fn layers_mut(&mut self) -> [&mut Conv; 6] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.bottleneck,
            &mut self.dec2,
            &mut self.dec1,
            &mut self.head,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, c)| c.weight.len() + c.bias.len()).sum()
    }

    fn add_assign(&mut self, other: &SegModel) {
        for (a, b) in self.layers_mut().into_iter().zip(other.layers()) {
            a.weight += &b.1.weight;
            a.bias += &b.1.bias;
        }
    }

    fn forward(&self, frame: ArrayView2<f64>) -> Trace {
        let (h, w) = frame.dim();
        let x0 = frame.to_owned().into_shape_with_order((1, h * w)).expect("frame size");
        let cols1 = self.enc1.columns(&x0, h, w);
        let a1 = relu(self.enc1.apply(&cols1));
        let (p1, pool1) = max_pool(&a1, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let cols2 = self.enc2.columns(&p1, h2, w2);
        let a2 = relu(self.enc2.apply(&cols2));
        let (p2, pool2) = max_pool(&a2, h2, w2);
        let (h3, w3) = (h2 / 2, w2 / 2);
        let cols3 = self.bottleneck.columns(&p2, h3, w3);
        let a3 = relu(self.bottleneck.apply(&cols3));
        let c4 = concatenate![Axis(0), upsample(&a3, h3, w3), a2];
        let cols4 = self.dec2.columns(&c4, h2, w2);
        let a4 = relu(self.dec2.apply(&cols4));
        let c5 = concatenate![Axis(0), upsample(&a4, h2, w2), a1];
        let cols5 = self.dec1.columns(&c5, h, w);
        let a5 = relu(self.dec1.apply(&cols5));
        let logits = self.head.apply(&a5);
        Trace {
            h,
            w,
            cols1,
            a1,
            pool1,
            cols2,
            a2,
            pool2,
            cols3,
            a3,
            cols4,
            a4,
            cols5,
            a5,
            logits,
        }
    }

    fn backward(&self, tr: &Trace, dlogits: &Array2<f64>) -> SegModel {
        let mut g = SegModel::zeros();
        let (h, w) = (tr.h, tr.w);
        let (h2, w2, h3, w3) = (h / 2, w / 2, h / 4, w / 4);
        let [c1, _, c3, c4, _] = CHANNELS;

        let da5 = self.head.backward(&tr.a5, dlogits, &mut g.head, h, w);
        let dz5 = relu_backward(&tr.a5, da5);
        let dc5 = self.dec1.backward(&tr.cols5, &dz5, &mut g.dec1, h, w);
        let mut da1 = dc5.slice(s![c4.., ..]).to_owned();
        let da4 = upsample_backward(&dc5.slice(s![..c4, ..]).to_owned(), h2, w2);

        let dz4 = relu_backward(&tr.a4, da4);
        let dc4 = self.dec2.backward(&tr.cols4, &dz4, &mut g.dec2, h2, w2);
        let mut da2 = dc4.slice(s![c3.., ..]).to_owned();
        let da3 = upsample_backward(&dc4.slice(s![..c3, ..]).to_owned(), h3, w3);

        let dz3 = relu_backward(&tr.a3, da3);
        let dp2 = self.bottleneck.backward(&tr.cols3, &dz3, &mut g.bottleneck, h3, w3);
        da2 += &max_pool_backward(&dp2, &tr.pool2, h2, w2);

        let dz2 = relu_backward(&tr.a2, da2);
        let dp1 = self.enc2.backward(&tr.cols2, &dz2, &mut g.enc2, h2, w2);
        da1 += &max_pool_backward(&dp1, &tr.pool1, h, w);
        debug_assert_eq!(da1.nrows(), c1);

        let dz1 = relu_backward(&tr.a1, da1);
        self.enc1.backward(&tr.cols1, &dz1, &mut g.enc1, h, w);
        g
    }

    /// Raw network outputs, `T x H x W x 4`.
    pub fn logits(&self, img: &ImageSequence) -> Result<Array4<f64>> {
        let g = img.geometry();
        check_geometry(g)?;
        let per_frame: Vec<Array2<f64>> = (0..g.frames)
            .into_par_iter()
            .map(|t| self.forward(img.frame(t)).logits)
            .collect();
        Ok(Array4::from_shape_fn(
            (g.frames, g.rows, g.cols, NUM_CLASSES),
            |(t, y, x, k)| per_frame[t][[k, y * g.cols + x]],
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let reference = SegModel::zeros();
        for ((name, a), (_, b)) in self.layers().iter().zip(reference.layers()) {
            ensure!(
                a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim() && a.kernel == b.kernel,
                "layer {name} has the wrong shape"
            );
            ensure!(
                a.weight.iter().chain(&a.bias).all(|v| v.is_finite()),
                "layer {name} has non-finite weights"
            );
        }
        Ok(())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, c) in self.layers() {
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: vec![c.c_out(), c.c_in(), c.kernel, c.kernel],
                values: c.weight.iter().copied().collect(),
            });
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: vec![c.c_out()],
                values: c.bias.to_vec(),
            });
        }
        out
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_params(stem, MODEL_KIND, &self.to_tensors())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let tensors = load_params(stem, MODEL_KIND)?;
        let mut model = SegModel::zeros();
        let names: Vec<&str> = model.layers().iter().map(|(n, _)| *n).collect();
        ensure!(
            tensors.len() == 2 * names.len(),
            "segmentation model needs {} tensors",
            2 * names.len()
        );
        for ((layer, name), pair) in model.layers_mut().into_iter().zip(names).zip(tensors.chunks(2)) {
            let (wt, bt) = (&pair[0], &pair[1]);
            ensure!(
                wt.name == format!("{name}.weight") && bt.name == format!("{name}.bias"),
                "unexpected tensor {} in segmentation model",
                wt.name
            );
            ensure!(
                wt.values.len() == layer.weight.len() && bt.values.len() == layer.bias.len(),
                "tensor {} has the wrong size",
                wt.name
            );
            layer.weight = Array2::from_shape_vec(layer.weight.dim(), wt.values.clone())
                .map_err(|e| Error::validation(e.to_string()))?;
            layer.bias = Array1::from(bt.values.clone());
        }
        model.validate()?;
        Ok(model)
    }
}

fn check_geometry(g: Geometry) -> Result<()> {
    ensure!(
        g.rows % 4 == 0 && g.cols % 4 == 0,
        "segmentation needs height and width divisible by 4, got {}x{}; pad the frames to a multiple of 4",
        g.rows,
        g.cols
    );
    Ok(())
}

/// Per-frame forward pass, softmax and argmax.
pub fn segment(model: &SegModel, img: &ImageSequence) -> Result<(ClassProbabilities, SegmentationMap)> {
    let logits = model.logits(img)?;
    let mut probs = logits;
    for mut px in probs.lanes_mut(Axis(3)) {
        let m = px.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        px.mapv_inplace(|v| (v - m).exp());
        let sum = px.sum();
        px.mapv_inplace(|v| v / sum);
    }
    let probs = ClassProbabilities(probs);
    let labels = probs.labels();
    Ok((probs, labels))
}

/// `-mean log(max(p_true, 1e-7))` over all pixels.
pub fn segmentation_loss(probs: &ClassProbabilities, truth: &SegmentationMap) -> Result<f64> {
    let (t, h, w, _) = probs.0.dim();
    ensure!(
        (t, h, w) == truth.dim(),
        "probabilities {:?} and labels {:?} differ in shape",
        (t, h, w),
        truth.dim()
    );
    let sum: f64 = truth
        .0
        .indexed_iter()
        .map(|((ti, y, x), &k)| probs.0[[ti, y, x, k as usize]].max(PROB_EPS).ln())
        .sum();
    Ok(-sum / (t * h * w) as f64)
}

/// `2|A n B| / (|A| + |B|)` for one class over all frames; 1.0 when both are empty.
pub fn dice(pred: &SegmentationMap, truth: &SegmentationMap, class_id: u8) -> Result<f64> {
    ensure!((class_id as usize) < NUM_CLASSES, "unknown class id {class_id}");
    ensure!(
        pred.dim() == truth.dim(),
        "label maps {:?} and {:?} differ in shape",
        pred.dim(),
        truth.dim()
    );
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &q) in pred.0.iter().zip(&truth.0) {
        let (ip, iq) = (p == class_id, q == class_id);
        a += ip as usize;
        b += iq as usize;
        both += (ip && iq) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Loss and parameter gradients of `scale * segmentation_loss` over a batch of
/// frames, each given as (magnitude frame, label frame). The mean runs over
/// every pixel of the batch.
pub fn segmentation_loss_and_grad(
    model: &SegModel,
    frames: &[(ArrayView2<f64>, ArrayView2<u8>)],
    scale: f64,
) -> Result<(f64, SegModel)> {
    ensure!(!frames.is_empty(), "empty segmentation batch");
    for (img, lab) in frames {
        ensure!(img.dim() == lab.dim(), "frame and label shapes differ");
        check_geometry(Geometry::new(1, img.nrows(), img.ncols())?)?;
    }
    let n: usize = frames.iter().map(|(img, _)| img.len()).sum();
    let inv = scale / n as f64;
    let parts: Vec<(f64, SegModel)> = frames
        .par_iter()
        .map(|(img, lab)| {
            let tr = model.forward(img.view());
            let mut d = softmax_columns(&tr.logits);
            let mut loss = 0.0;
            for (p, &k) in lab.iter().enumerate() {
                let k = k as usize;
                let pt = d[[k, p]];
                loss -= pt.max(PROB_EPS).ln();
                if pt < PROB_EPS {
                    d.column_mut(p).fill(0.0);
                } else {
                    d[[k, p]] -= 1.0;
                }
            }
            d.mapv_inplace(|v| v * inv);
            (loss, model.backward(&tr, &d))
        })
        .collect();
    let mut grad = SegModel::zeros();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g);
    }
    Ok((scale * loss / n as f64, grad))
}

#[derive(Clone, Debug)]
pub struct TrainedSegmenter {
    pub model: SegModel,
    pub loss_trace: Vec<f64>,
}

/// Trains from `SegModel::init(cfg.seed)` on the frames of all sequences.
pub fn train_segmenter(corpus: &[(ImageSequence, SegmentationMap)], cfg: &TrainConfig) -> Result<TrainedSegmenter> {
    train_segmenter_scaled(SegModel::init(cfg.seed), corpus, cfg, 1.0)
}

/// Mini-batches are groups of `batch_size` frames in a seeded order; the loss
/// is multiplied by `scale` before differentiation.
pub fn train_segmenter_scaled(
    mut model: SegModel,
    corpus: &[(ImageSequence, SegmentationMap)],
    cfg: &TrainConfig,
    scale: f64,
) -> Result<TrainedSegmenter> {
    ensure!(!corpus.is_empty(), "segmenter training corpus is empty");
    ensure!(scale.is_finite() && scale >= 0.0, "loss scale must be finite and >= 0");
    cfg.validate()?;
    model.validate()?;
    let mut index = Vec::new();
    for (i, (img, lab)) in corpus.iter().enumerate() {
        let g = img.geometry();
        ensure!(g.shape() == lab.dim(), "case {i}: image and labels differ in shape");
        check_geometry(g)?;
        index.extend((0..g.frames).map(|t| (i, t)));
    }
    let mut rng = seeded(cfg.seed ^ 0x5E6_7A1E);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        index.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut pixels = 0usize;
        for chunk in index.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&(i, t)| (corpus[i].0.frame(t), corpus[i].1.data().index_axis(Axis(0), t)))
                .collect();
            let (loss, g) = segmentation_loss_and_grad(&model, &batch, scale)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, loss });
            }
            let n: usize = batch.iter().map(|(f, _)| f.len()).sum();
            weighted += loss * n as f64;
            pixels += n;
            adam.begin_step();
            for (slot, (layer, grad)) in model.layers_mut().into_iter().zip(g.layers()).enumerate() {
                adam.update(
                    2 * slot,
                    layer.weight.as_slice_mut().expect("contiguous"),
                    grad.1.weight.as_slice().expect("contiguous"),
                );
                adam.update(
                    2 * slot + 1,
                    layer.bias.as_slice_mut().expect("contiguous"),
                    grad.1.bias.as_slice().expect("contiguous"),
                );
            }
        }
        let mean = weighted / pixels as f64;
        log::debug!("segmenter epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(TrainedSegmenter {
        model,
        loss_trace: trace,
    })
}
