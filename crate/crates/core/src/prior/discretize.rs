//! Ranking discretization and its differentiable relaxation.
//!
//! A column `x` is compared against quantiles rescaled to the column,
//! `q~_l = mean(x) + std(x) * q_l`, with the column minimum and maximum as
//! outer boundaries. The hard category of a value is `perm[c]` where `c` counts
//! the rescaled quantiles not above it. The soft value adds
//! `tau * ln(1 + r)`, where `r` in `[0, 1]` is the position of the value
//! between its two bracketing boundaries.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::stats;
use crate::tensor::{Tensor, Var};
use crate::{Error, Result};

/// Guard for a zero-width bracket.
pub const BRACKET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizerSpec {
    /// Standard-normal quantile draws, strictly increasing, `cardinality - 1` of them.
    pub quantiles: Vec<f64>,
    /// Bijection on `0..cardinality`.
    pub permutation: Vec<usize>,
    pub temperature: f64,
}

impl DiscretizerSpec {
    pub fn new(quantiles: Vec<f64>, permutation: Vec<usize>, temperature: f64) -> Result<Self> {
        let spec = Self {
            quantiles,
            permutation,
            temperature,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Sorted standard-normal draws and a uniform permutation; temperature 0.
    pub fn sample(cardinality: usize, rng: &mut impl Rng) -> Self {
        assert!(cardinality >= 2, "cardinality must be at least 2");
        let quantiles = loop {
            let mut q: Vec<f64> = (0..cardinality - 1)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            q.sort_by(|a, b| a.total_cmp(b));
            if q.windows(2).all(|w| w[0] < w[1]) {
                break q;
            }
        };
        let mut permutation: Vec<usize> = (0..cardinality).collect();
        permutation.shuffle(rng);
        Self {
            quantiles,
            permutation,
            temperature: 0.0,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn cardinality(&self) -> usize {
        self.permutation.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.permutation.len();
        if n < 2 || self.quantiles.len() + 1 != n {
            return Err(Error::Data(format!(
                "discretizer needs cardinality >= 2 and cardinality - 1 quantiles, got {} and {}",
                n,
                self.quantiles.len()
            )));
        }
        if !self.quantiles.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Data("quantiles must be strictly increasing".into()));
        }
        let mut seen = vec![false; n];
        for &p in &self.permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Data("permutation is not a bijection".into()));
            }
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Data("temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// Quantiles rescaled to a column with the given mean and std.
    fn rescaled(&self, mean: f64, std: f64) -> Vec<f64> {
        self.quantiles.iter().map(|&q| mean + std * q).collect()
    }

    /// Position of `v`: the number of rescaled quantiles `<= v`. A constant
    /// column counts the raw quantiles `<= 0`, i.e. where the standardized
    /// value 0 falls.
    fn position(&self, v: f64, rescaled: &[f64], std: f64) -> usize {
        if std == 0.0 {
            self.quantiles.iter().filter(|&&q| q <= 0.0).count()
        } else {
            rescaled.iter().filter(|&&q| v >= q).count()
        }
    }
}

/// Category index of each value.
pub fn hard_discretize(col: &[f64], spec: &DiscretizerSpec) -> Vec<usize> {
    let mean = stats::mean(col);
    let std = if stats::is_constant(col) {
        0.0
    } else {
        stats::variance(col).sqrt()
    };
    let q = spec.rescaled(mean, std);
    col.iter()
        .map(|&v| spec.permutation[spec.position(v, &q, std)])
        .collect()
}

/// Differentiable soft-categorical values of a length-`n` column.
///
/// With temperature 0 the result is the constant `perm[c]`, detached from the
/// tape. Otherwise gradients flow into the column through the value itself,
/// through the column mean and std (which move the interior boundaries) and
/// through the column extremes (the outer boundaries).
pub fn soft_discretize<'t>(col: Var<'t>, spec: &DiscretizerSpec) -> Result<Var<'t>> {
    spec.validate()?;
    let tape = col.tape();
    let shape = col.shape();
    if shape.len() != 1 {
        return Err(Error::Data(format!("soft_discretize expects a vector, got {shape:?}")));
    }
    let values = col.to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("soft_discretize expects a finite column".into()));
    }
    let n = values.len();
    let k = spec.quantiles.len();

    let mean = col.mean();
    let var = col.var_axis(0)?;
    let (mean_v, var_v) = (mean.item(), var.item());
    let base_of = |pos: &[usize]| -> Vec<f64> {
        pos.iter().map(|&c| spec.permutation[c] as f64).collect()
    };

    let constant = stats::is_constant(&values);
    if constant || spec.temperature == 0.0 {
        let std_v = if constant { 0.0 } else { var_v.sqrt() };
        let rescaled = spec.rescaled(mean_v, std_v);
        let pos: Vec<usize> = values.iter().map(|&v| spec.position(v, &rescaled, std_v)).collect();
        return Ok(tape.constant(Tensor::vector(base_of(&pos))));
    }

    let std = var.sqrt();
    let qconst = tape.constant(Tensor::vector(spec.quantiles.clone()));
    let rescaled = mean
        .expand(vec![k])?
        .add(std.expand(vec![k])?.mul(qconst)?)?;
    let rescaled_v = rescaled.to_vec();
    let pos: Vec<usize> = values
        .iter()
        .map(|&v| spec.position(v, &rescaled_v, std.item()))
        .collect();

    let argmin = argext(&values, |a, b| a < b);
    let argmax = argext(&values, |a, b| a > b);
    let lo = col.gather(vec![argmin], vec![1])?;
    let hi = col.gather(vec![argmax], vec![1])?;
    let bounds = Var::concat(&[lo, rescaled, hi], 0)?;

    let lower = bounds.gather(pos.clone(), vec![n])?;
    let upper = bounds.gather(pos.iter().map(|&c| c + 1).collect(), vec![n])?;
    let ratio = col
        .sub(lower)?
        .div(upper.sub(lower)?.clip(BRACKET_EPS, f64::INFINITY))?;
    let soft = ratio.add_scalar(1.0).log().mul_scalar(spec.temperature);
    let base = tape.constant(Tensor::vector(base_of(&pos)));
    Ok(base.add(soft)?)
}

fn argext(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}
