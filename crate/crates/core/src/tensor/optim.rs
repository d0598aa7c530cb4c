use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Gradients, Result, Tape, Tensor, TensorError, Var};

/// A named learnable tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

/// Ordered collection of parameters. Order is fixed at construction and is
/// the order used by checkpoints.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
    #[serde(skip)]
    index: Arc<HashMap<String, usize>>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

/// Parameters placed on a tape as leaves.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: Arc<HashMap<String, usize>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        Arc::make_mut(&mut self.index).insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
    }

    /// Rebuilds the name index, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.index = Arc::new(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| (p.name.clone(), i))
                .collect(),
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].value)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        Bound {
            vars,
            index: Arc::clone(&self.index),
        }
    }

    /// Adds `scale * grad` of every bound leaf into the parameter's
    /// accumulator. Leaves without a gradient contribute zeros.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients, scale: f64) {
        for (p, v) in self.params.iter_mut().zip(bound.vars()) {
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = grads.get(*v) {
                acc.data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &gv)| *a += scale * gv);
            }
        }
    }

    /// Adds flat gradient buffers (in parameter order) into the accumulators.
    pub fn accumulate_flat(&mut self, flat: &[Vec<f64>], scale: f64) {
        for (p, g) in self.params.iter_mut().zip(flat) {
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            acc.data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, &gv)| *a += scale * gv);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.as_ref().map_or(true, Tensor::is_finite))
    }

    pub fn values_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Hash over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn require_grad(p: &Param) -> Result<&Tensor> {
    p.grad
        .as_ref()
        .ok_or_else(|| TensorError::MissingGradient(p.name.clone()))
}

/// Gradient ascent with decoupled weight decay:
/// `p <- (p + lr * grad) * (1 - lr * weight_decay)`.
pub fn ascend_step(params: &mut ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
    for p in params.params.iter() {
        require_grad(p)?;
    }
    let decay = 1.0 - lr * weight_decay;
    for p in params.params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        for (v, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v = (*v + lr * gv) * decay;
        }
    }
    Ok(())
}

/// Plain gradient descent, `p <- p - lr * grad`.
pub fn descend_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    for p in params.params.iter() {
        require_grad(p)?;
    }
    for p in params.params.iter_mut() {
        let g = p.grad.as_ref().expect("checked above");
        for (v, &gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for p in params.params.iter() {
            require_grad(p)?;
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.params.iter_mut().enumerate() {
            let g = p.grad.as_ref().expect("checked above");
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for (j, (w, &gv)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
