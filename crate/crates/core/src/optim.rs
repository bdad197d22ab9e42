//! Adaptive-moment gradient descent and the training settings shared by the
//! detector and the segmenter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, DType, Header};
use crate::error::{ensure, Error, Result};

/// Mini-batch training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 5e-4,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning rate must be > 0"
        );
        ensure!(self.batch_size >= 1, "batch size must be >= 1");
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are kept per parameter tensor,
/// addressed by the slot index passed to [`Adam::update`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Advances the shared time step; call once per optimizer step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert!(self.step > 0, "begin_step must precede update");
        if self.first.len() <= slot {
            self.first.resize(slot + 1, Vec::new());
            self.second.resize(slot + 1, Vec::new());
        }
        if self.first[slot].len() != params.len() {
            self.first[slot] = vec![0.0; params.len()];
            self.second[slot] = vec![0.0; params.len()];
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// A named parameter tensor, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Stores model parameters as one flat f32 payload; tensor names and shapes
/// go into the header's `meta`.
pub fn save_params(stem: &Path, kind: &str, tensors: &[NamedTensor]) -> Result<()> {
    let total: usize = tensors.iter().map(|t| t.values.len()).sum();
    let payload: Vec<u8> = tensors
        .iter()
        .flat_map(|t| t.values.iter())
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let meta = serde_json::json!({
        "kind": kind,
        "tensors": tensors
            .iter()
            .map(|t| serde_json::json!({"name": t.name, "shape": t.shape}))
            .collect::<Vec<_>>(),
    });
    let header = Header::new(DType::F32, vec![total]).with_meta(meta);
    container::write_raw(stem, &header, &payload)
}

pub fn load_params(stem: &Path, kind: &str) -> Result<Vec<NamedTensor>> {
    #[derive(Deserialize)]
    struct Entry {
        name: String,
        shape: Vec<usize>,
    }
    #[derive(Deserialize)]
    struct Meta {
        kind: String,
        tensors: Vec<Entry>,
    }
    let (header, payload) = container::read_raw(stem)?;
    ensure!(header.dtype == DType::F32, "model payload must be f32");
    let meta: Meta = serde_json::from_value(
        header
            .meta
            .ok_or_else(|| Error::validation("model header has no meta"))?,
    )?;
    ensure!(meta.kind == kind, "expected a {kind} file, found {}", meta.kind);
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    let mut out = Vec::with_capacity(meta.tensors.len());
    for e in meta.tensors {
        let n: usize = e.shape.iter().product();
        let v: Vec<f64> = values.by_ref().take(n).collect();
        ensure!(v.len() == n, "model payload too short for tensor {}", e.name);
        ensure!(
            v.iter().all(|x| x.is_finite()),
            "tensor {} has non-finite weights",
            e.name
        );
        out.push(NamedTensor {
            name: e.name,
            shape: e.shape,
            values: v,
        });
    }
    ensure!(values.next().is_none(), "model payload has trailing values");
    Ok(out)
}
