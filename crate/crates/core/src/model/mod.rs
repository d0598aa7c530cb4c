//! The in-context meta-learner: feature and label embeddings, test-masked
//! transformer blocks, a scatter-sum mixture head (or a dense head) for
//! classification and a Gaussian head for regression.

mod checkpoint;
mod forward;

pub(crate) use checkpoint::{read_tensor_file, write_tensor_file};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use forward::{
    dense_head, embed, encode, forward, gaussian_head, gaussian_nll, mixture_block, nll, Context, GateMode,
    Output, Targets, MIXTURE_EPS, NLL_EPS, SIGMA_FLOOR,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskKind};
use crate::rng::rng_from;
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Zero-pad (or truncate) each row to `feature_width` and embed it.
    Dense,
    /// Split each row into patches of `feature_width`, embed every patch,
    /// mix patches with one attention layer and average-pool.
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierHead {
    Mixture,
    /// Fixed-size softmax over `dense_classes` logits.
    Dense,
}

/// Architecture hyperparameters. Every model carries the Gaussian regression
/// head; `classifier` picks the head used for classification episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Embedded row width `d*` (dense) or patch width (patch).
    pub feature_width: usize,
    pub embedding: EmbeddingKind,
    pub classifier: ClassifierHead,
    /// Concrete temperature of the mixture gates.
    pub gate_temperature: f64,
    /// Class cap of the dense head.
    pub dense_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 3,
            heads: 2,
            ff_width: 128,
            feature_width: 10,
            embedding: EmbeddingKind::Dense,
            classifier: ClassifierHead::Mixture,
            gate_temperature: 0.1,
            dense_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.feature_width == 0 || self.ff_width == 0 {
            return bad("feature and feedforward widths must be at least 1".into());
        }
        if !(self.gate_temperature > 0.0) {
            return bad(format!("gate temperature must be positive, got {}", self.gate_temperature));
        }
        if self.dense_classes < 2 {
            return bad("dense head needs at least 2 classes".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, fw, ff) = (self.d_model, self.feature_width, self.ff_width);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.weight".into(), vec![fw, dm]),
            ("embed.bias".into(), vec![dm]),
            ("label.weight".into(), vec![1, dm]),
            ("label.bias".into(), vec![dm]),
        ];
        if self.embedding == EmbeddingKind::Patch {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("patch.{p}.weight"), vec![dm, dm]));
            }
            out.push(("patch.o.bias".into(), vec![dm]));
        }
        for b in 0..self.blocks {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("block{b}.attn.{p}.weight"), vec![dm, dm]));
            }
            out.push((format!("block{b}.attn.o.bias"), vec![dm]));
            out.push((format!("block{b}.ff1.weight"), vec![dm, ff]));
            out.push((format!("block{b}.ff1.bias"), vec![ff]));
            out.push((format!("block{b}.ff2.weight"), vec![ff, dm]));
            out.push((format!("block{b}.ff2.bias"), vec![dm]));
        }
        match self.classifier {
            ClassifierHead::Mixture => {
                for p in ["weight_q", "weight_k", "gate_q", "gate_k"] {
                    out.push((format!("mixture.{p}"), vec![dm, dm]));
                }
                out.push(("mixture.gate_bias".into(), vec![1]));
            }
            ClassifierHead::Dense => {
                out.push(("dense.weight".into(), vec![dm, self.dense_classes]));
                out.push(("dense.bias".into(), vec![self.dense_classes]));
            }
        }
        out.push(("gauss.weight".into(), vec![dm, 2]));
        out.push(("gauss.bias".into(), vec![2]));
        out
    }

    /// Fresh parameters: weights `N(0, 1/fan_in)`, biases zero, mixture gates
    /// biased open.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = rng_from(seed);
        let mut params = ParamSet::new();
        for (name, shape) in self.inventory() {
            let numel: usize = shape.iter().product();
            let data = if name == "mixture.gate_bias" {
                vec![1.0]
            } else if name.ends_with("bias") {
                vec![0.0; numel]
            } else {
                let normal = Normal::new(0.0, 1.0 / (shape[0] as f64).sqrt())
                    .map_err(|e| Error::Model(e.to_string()))?;
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(params)
    }

    /// Checks that `params` matches this configuration's inventory.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let want = self.inventory();
        if want.len() != params.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in want.iter().zip(params.iter()) {
            if name != &p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Model(format!(
                    "parameter `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A dataset with its split position: rows `0..split` train, the rest test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub dataset: Dataset,
    pub split: usize,
}

impl Episode {
    pub fn new(dataset: Dataset, split: usize) -> Result<Self> {
        if split == 0 || split >= dataset.n {
            return Err(Error::Data(format!(
                "split {split} must lie in 1..{} for {} rows",
                dataset.n, dataset.n
            )));
        }
        Ok(Self { dataset, split })
    }

    pub fn num_test(&self) -> usize {
        self.dataset.n - self.split
    }

    pub fn task(&self) -> TaskKind {
        self.dataset.task
    }

    pub fn targets(&self) -> Targets {
        let ys = &self.dataset.y[self.split..];
        match self.dataset.task {
            TaskKind::Classification => Targets::Classes(ys.iter().map(|&v| v as usize).collect()),
            TaskKind::Regression => Targets::Values(ys.to_vec()),
        }
    }
}

/// Plain-value model output for the test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    /// Row-major `rows x classes` probabilities.
    Classification {
        probs: Vec<f64>,
        rows: usize,
        classes: usize,
    },
    Regression { mu: Vec<f64>, sigma: Vec<f64> },
}

impl Prediction {
    pub fn rows(&self) -> usize {
        match self {
            Prediction::Classification { rows, .. } => *rows,
            Prediction::Regression { mu, .. } => mu.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        match self {
            Prediction::Classification { probs, classes, .. } => &probs[i * classes..(i + 1) * classes],
            Prediction::Regression { mu, .. } => std::slice::from_ref(&mu[i]),
        }
    }

    /// Point estimate per row: argmax class or Gaussian mean.
    pub fn point(&self) -> Vec<f64> {
        match self {
            Prediction::Classification { rows, .. } => (0..*rows)
                .map(|i| {
                    let r = self.row(i);
                    let mut best = 0;
                    for (c, &p) in r.iter().enumerate() {
                        if p > r[best] {
                            best = c;
                        }
                    }
                    best as f64
                })
                .collect(),
            Prediction::Regression { mu, .. } => mu.clone(),
        }
    }
}
