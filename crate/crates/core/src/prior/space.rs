use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::discretize::DiscretizerSpec;
use crate::data::TaskKind;
use crate::rng::rng_from;
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    pub const fn fixed(v: usize) -> Self {
        Self { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// Closed real interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealRange {
    pub min: f64,
    pub max: f64,
}

impl RealRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Distribution over sparsified noisy MLP generators and the random factors
/// of the datasets they emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorHyperSpace {
    /// Number of hidden layers.
    pub layers: IntRange,
    pub width: IntRange,
    pub activations: Vec<Activation>,
    /// Probability of dropping each connection, sampled once per generator.
    pub dropout: RealRange,
    /// Standard deviation of the Gaussian noise added to each layer's output.
    pub noise_std: RealRange,
    /// Gain applied to the fan-in scaled weight initialization.
    pub weight_scale: RealRange,
    pub features: IntRange,
    pub samples: IntRange,
    pub classes: IntRange,
    /// Upper bound of the per-generator fraction of categorical features.
    pub categorical_fraction: f64,
    pub cardinality: IntRange,
    /// Probability that a generator emits a classification task.
    pub classification_prob: f64,
}

impl Default for GeneratorHyperSpace {
    fn default() -> Self {
        Self {
            layers: IntRange::new(2, 4),
            width: IntRange::new(8, 32),
            activations: vec![
                Activation::Tanh,
                Activation::Relu,
                Activation::Sigmoid,
                Activation::Identity,
            ],
            dropout: RealRange::new(0.0, 0.6),
            noise_std: RealRange::new(0.01, 0.3),
            weight_scale: RealRange::new(0.5, 2.0),
            features: IntRange::new(1, 10),
            samples: IntRange::new(40, 120),
            classes: IntRange::new(2, 5),
            categorical_fraction: 0.3,
            cardinality: IntRange::new(2, 6),
            classification_prob: 1.0,
        }
    }
}

impl GeneratorHyperSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("generator space: {what}")));
        for (name, r) in [
            ("layers", self.layers),
            ("width", self.width),
            ("features", self.features),
            ("samples", self.samples),
            ("classes", self.classes),
            ("cardinality", self.cardinality),
        ] {
            if r.min > r.max {
                return bad(&format!("{name} range is empty ({}..={})", r.min, r.max));
            }
        }
        if self.layers.min == 0 || self.width.min == 0 {
            return bad("layer count and width must be at least 1");
        }
        if self.features.min == 0 {
            return bad("feature count must be at least 1");
        }
        if self.samples.min < 4 {
            return bad("sample count must be at least 4");
        }
        if self.classes.min < 2 || self.cardinality.min < 2 {
            return bad("class count and cardinality must be at least 2");
        }
        if self.activations.is_empty() {
            return bad("activation set is empty");
        }
        for (name, r) in [
            ("dropout", self.dropout),
            ("noise_std", self.noise_std),
            ("weight_scale", self.weight_scale),
        ] {
            if !(r.min <= r.max) || r.min < 0.0 {
                return bad(&format!("{name} range invalid ({}..={})", r.min, r.max));
            }
        }
        if self.dropout.max >= 1.0 {
            return bad("dropout probability must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.categorical_fraction)
            || !(0.0..=1.0).contains(&self.classification_prob)
        {
            return bad("fractions must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One sampled data-generating mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInstance {
    pub task: TaskKind,
    pub width: usize,
    pub activation: Activation,
    /// `layer{i}.weight` (`width x width`) and `layer{i}.bias` (`width`).
    pub params: ParamSet,
    /// Connection masks (1 keep, 0 drop), one per layer, fixed for life.
    pub masks: Vec<Vec<f64>>,
    pub noise_std: Vec<f64>,
    /// Indices into the concatenated hidden-layer outputs.
    pub feature_neurons: Vec<usize>,
    pub response_neuron: usize,
    /// `Some` for categorical features.
    pub feature_specs: Vec<Option<DiscretizerSpec>>,
    /// `Some` for classification; its cardinality is the class count.
    pub response_spec: Option<DiscretizerSpec>,
    /// Row count used when the caller does not specify one.
    pub default_samples: usize,
}

impl GeneratorInstance {
    pub fn num_layers(&self) -> usize {
        self.masks.len()
    }

    pub fn num_features(&self) -> usize {
        self.feature_neurons.len()
    }

    pub fn num_classes(&self) -> usize {
        self.response_spec.as_ref().map_or(0, |s| s.cardinality())
    }

    pub fn categorical_mask(&self) -> Vec<bool> {
        self.feature_specs.iter().map(Option::is_some).collect()
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.params.reindex();
    }
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Draws a generator. Deterministic in `(space, seed)`.
pub fn sample_generator(space: &GeneratorHyperSpace, seed: u64) -> Result<GeneratorInstance> {
    space.validate()?;
    let mut rng = rng_from(seed);
    let layers = space.layers.sample(&mut rng);
    let width = space.width.sample(&mut rng);
    let activation = *space
        .activations
        .choose(&mut rng)
        .expect("validated non-empty");
    let dropout = space.dropout.sample(&mut rng);
    let weight_scale = space.weight_scale.sample(&mut rng);
    let noise_std: Vec<f64> = (0..layers).map(|_| space.noise_std.sample(&mut rng)).collect();
    let task = if rng.gen_bool(space.classification_prob) {
        TaskKind::Classification
    } else {
        TaskKind::Regression
    };
    let d = space.features.sample(&mut rng);
    let pool = layers * width;
    if pool < d + 1 {
        return Err(Error::Generator(format!(
            "{layers} layers of width {width} give {pool} neurons, need {} for {d} features and a response",
            d + 1
        )));
    }
    let chosen = sample_indices(&mut rng, pool, d + 1).into_vec();
    let response_neuron = chosen[0];
    let feature_neurons = chosen[1..].to_vec();

    let cat_frac = rng.gen_range(0.0..=space.categorical_fraction);
    let feature_specs = (0..d)
        .map(|_| {
            if rng.gen_bool(cat_frac) {
                let card = space.cardinality.sample(&mut rng);
                Some(DiscretizerSpec::sample(card, &mut rng))
            } else {
                None
            }
        })
        .collect();
    let response_spec = match task {
        TaskKind::Classification => {
            let c = space.classes.sample(&mut rng);
            Some(DiscretizerSpec::sample(c, &mut rng))
        }
        TaskKind::Regression => None,
    };

    let keep = 1.0 - dropout;
    let init = Normal::new(0.0, weight_scale / ((width as f64) * keep).max(1.0).sqrt())
        .map_err(|e| Error::Generator(e.to_string()))?;
    let mut params = ParamSet::new();
    let mut masks = Vec::with_capacity(layers);
    for l in 0..layers {
        let w: Vec<f64> = (0..width * width).map(|_| init.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..width)
            .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let mask: Vec<f64> = (0..width * width)
            .map(|_| if rng.gen_bool(keep) { 1.0 } else { 0.0 })
            .collect();
        params.push(weight_name(l), Tensor::new(vec![width, width], w)?);
        params.push(bias_name(l), Tensor::vector(b));
        masks.push(mask);
    }
    let default_samples = space.samples.sample(&mut rng);

    Ok(GeneratorInstance {
        task,
        width,
        activation,
        params,
        masks,
        noise_std,
        feature_neurons,
        response_neuron,
        feature_specs,
        response_spec,
        default_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let space = GeneratorHyperSpace::default();
        let a = sample_generator(&space, 42).unwrap();
        let b = sample_generator(&space, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = sample_generator(&space, 43).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn zero_dropout_is_dense() {
        let space = GeneratorHyperSpace {
            dropout: RealRange::new(0.0, 0.0),
            ..Default::default()
        };
        for seed in 0..10 {
            let g = sample_generator(&space, seed).unwrap();
            assert!(g.masks.iter().flatten().all(|&m| m == 1.0));
        }
    }

    #[test]
    fn heavy_dropout_retained_fraction() {
        // 10,000 edges at p = 0.9; the binomial standard deviation of the
        // retained fraction is 0.003, so [0.08, 0.12] is a > 6 sigma band.
        let space = GeneratorHyperSpace {
            layers: IntRange::fixed(1),
            width: IntRange::fixed(100),
            features: IntRange::fixed(2),
            dropout: RealRange::new(0.9, 0.9),
            ..Default::default()
        };
        for seed in 0..5 {
            let g = sample_generator(&space, seed).unwrap();
            let kept = g.masks[0].iter().sum::<f64>() / g.masks[0].len() as f64;
            assert_eq!(g.masks[0].len(), 10_000);
            assert!((0.08..=0.12).contains(&kept), "retained {kept}");
        }
    }

    #[test]
    fn neuron_selection_is_disjoint() {
        let space = GeneratorHyperSpace::default();
        for seed in 0..50 {
            let g = sample_generator(&space, seed).unwrap();
            let mut all = g.feature_neurons.clone();
            all.push(g.response_neuron);
            let n = all.len();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), n);
            assert!(all.iter().all(|&i| i < g.width * g.num_layers()));
        }
    }

    #[test]
    fn degenerate_ranges_rejected() {
        let mut space = GeneratorHyperSpace {
            width: IntRange::fixed(0),
            ..Default::default()
        };
        assert!(sample_generator(&space, 0).is_err());
        space.width = IntRange::new(5, 3);
        assert!(sample_generator(&space, 0).is_err());
        space.width = IntRange::fixed(8);
        space.dropout = RealRange::new(0.0, 1.0);
        assert!(sample_generator(&space, 0).is_err());
        space.dropout = RealRange::new(0.0, 0.5);
        space.samples = IntRange::fixed(3);
        assert!(sample_generator(&space, 0).is_err());
    }

    #[test]
    fn too_small_neuron_pool_is_an_error() {
        let space = GeneratorHyperSpace {
            layers: IntRange::fixed(1),
            width: IntRange::fixed(2),
            features: IntRange::fixed(4),
            ..Default::default()
        };
        assert!(matches!(sample_generator(&space, 1), Err(Error::Generator(_))));
    }
}
