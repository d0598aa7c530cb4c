//! Forward simulation of a generator MLP on a tape.
//!
//! Ordinary generators run with constant parameters and hard discretization.
//! Adversarial agents bind their parameters as leaves and use the soft
//! relaxation so that the emitted dataset is differentiable in the weights.

use rand_distr::{Distribution, StandardNormal};

use super::discretize::{hard_discretize, soft_discretize, DiscretizerSpec};
use super::normalize::{normalize_columns, normalize_vector};
use super::space::{bias_name, weight_name, Activation, GeneratorInstance};
use crate::data::{Dataset, TaskKind};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Bound, Tape, Tensor, Var};
use crate::{Error, Result};

/// Resamples allowed when a classification draw yields a single class.
pub const MAX_RETRIES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discretization {
    /// Ranking discretization; the result is detached from the weights.
    Hard,
    /// Soft relaxation at each spec's own temperature.
    Soft,
}

/// A generated dataset living on a tape.
pub struct TapeDataset<'t> {
    /// Normalized `n x d` predictors.
    pub x: Var<'t>,
    /// Response fed to the label embedding: soft class values for
    /// classification, the normalized response for regression.
    pub y: Var<'t>,
    /// Value snapshot. For classification `y` holds the hard labels.
    pub dataset: Dataset,
    /// Seed of the input draw that produced the dataset (after retries).
    pub input_seed: u64,
}

fn activate<'t>(h: Var<'t>, act: Activation) -> Var<'t> {
    match act {
        Activation::Tanh => h.tanh(),
        Activation::Relu => h.relu(),
        Activation::Sigmoid => h.sigmoid(),
        Activation::Identity => h,
    }
}

fn gaussian(n: usize, std: f64, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// Runs the MLP on inputs drawn from `input_seed` and reads out the raw
/// feature matrix `n x d` and response vector `n`.
fn simulate<'t>(
    tape: &'t Tape,
    g: &GeneratorInstance,
    params: &Bound<'t>,
    n: usize,
    input_seed: u64,
) -> Result<(Var<'t>, Var<'t>)> {
    let w = g.width;
    let mut rng = rng_from(input_seed);
    let mut h = tape.constant(Tensor::new(vec![n, w], gaussian(n * w, 1.0, &mut rng))?);
    let mut outputs = Vec::with_capacity(g.num_layers());
    for l in 0..g.num_layers() {
        let mask = tape.constant(Tensor::new(vec![w, w], g.masks[l].clone())?);
        let weight = params.get(&weight_name(l)).mul(mask)?;
        let pre = h.matmul(weight)?.add(params.get(&bias_name(l)))?;
        let noise = tape.constant(Tensor::new(vec![n, w], gaussian(n * w, g.noise_std[l], &mut rng))?);
        h = activate(pre, g.activation).add(noise)?;
        outputs.push(h);
    }
    let all = Var::concat(&outputs, 1)?;
    let pool = w * g.num_layers();
    let d = g.num_features();
    let feat_idx: Vec<usize> = (0..n)
        .flat_map(|i| g.feature_neurons.iter().map(move |&j| i * pool + j))
        .collect();
    let x = all.gather(feat_idx, vec![n, d])?;
    let y = all.gather((0..n).map(|i| i * pool + g.response_neuron).collect(), vec![n])?;
    Ok((x, y))
}

fn spec_for(spec: &DiscretizerSpec, mode: Discretization) -> DiscretizerSpec {
    match mode {
        Discretization::Hard => spec.clone().with_temperature(0.0),
        Discretization::Soft => spec.clone(),
    }
}

fn attempt<'t>(
    tape: &'t Tape,
    g: &GeneratorInstance,
    params: &Bound<'t>,
    n: usize,
    input_seed: u64,
    mode: Discretization,
) -> Result<Option<TapeDataset<'t>>> {
    let (raw_x, raw_y) = simulate(tape, g, params, n, input_seed)?;
    if !raw_x.value().is_finite() || !raw_y.value().is_finite() {
        return Err(Error::Generator("generator produced non-finite activations".into()));
    }
    let d = g.num_features();
    let mut cols = Vec::with_capacity(d);
    for (j, spec) in g.feature_specs.iter().enumerate() {
        let col = raw_x.narrow(1, j, 1)?;
        cols.push(match spec {
            Some(s) => soft_discretize(col.reshape(vec![n])?, &spec_for(s, mode))?.reshape(vec![n, 1])?,
            None => col,
        });
    }
    let x = normalize_columns(Var::concat(&cols, 1)?)?;

    let (y, labels, num_classes) = match (&g.response_spec, g.task) {
        (Some(spec), TaskKind::Classification) => {
            let labels = hard_discretize(&raw_y.to_vec(), spec);
            let mut seen = vec![false; spec.cardinality()];
            labels.iter().for_each(|&c| seen[c] = true);
            if seen.iter().filter(|&&s| s).count() < 2 {
                return Ok(None);
            }
            let y = soft_discretize(raw_y, &spec_for(spec, mode))?;
            let labels: Vec<f64> = labels.into_iter().map(|c| c as f64).collect();
            (y, labels, spec.cardinality())
        }
        (None, TaskKind::Regression) => {
            let y = normalize_vector(raw_y)?;
            (y, y.to_vec(), 0)
        }
        _ => return Err(Error::Generator("task kind and response spec disagree".into())),
    };
    let mut dataset = Dataset::new(n, d, x.to_vec(), labels, g.task, num_classes)?;
    dataset.categorical = g.categorical_mask();
    Ok(Some(TapeDataset {
        x,
        y,
        dataset,
        input_seed,
    }))
}

/// Generates `n` rows on `tape` using the already bound parameters. Input
/// draws for attempt `k` come from `derive_seed(seed, [k])`.
pub fn generate_on_tape<'t>(
    tape: &'t Tape,
    g: &GeneratorInstance,
    params: &Bound<'t>,
    n: usize,
    seed: u64,
    mode: Discretization,
) -> Result<TapeDataset<'t>> {
    if n < 4 {
        return Err(Error::Generator(format!("need at least 4 rows, got {n}")));
    }
    for k in 0..MAX_RETRIES {
        let input_seed = derive_seed(seed, &[k as u64]);
        if let Some(out) = attempt(tape, g, params, n, input_seed, mode)? {
            return Ok(out);
        }
    }
    Err(Error::Generator(format!(
        "response collapsed to a single class in {MAX_RETRIES} draws"
    )))
}

/// Hard-discretized, normalized dataset. A pure function of `(g, n, seed)`.
pub fn generate_dataset(g: &GeneratorInstance, n: usize, seed: u64) -> Result<Dataset> {
    let tape = Tape::new();
    let params = g.params.bind(&tape, false);
    Ok(generate_on_tape(&tape, g, &params, n, seed, Discretization::Hard)?.dataset)
}
