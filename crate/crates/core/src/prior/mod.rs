//! Synthetic data prior: random sparsified MLP generators, ranking
//! discretization and its soft relaxation, and per-dataset normalization.

mod discretize;
mod generate;
mod normalize;
mod space;

pub use discretize::{hard_discretize, soft_discretize, DiscretizerSpec, BRACKET_EPS};
pub use generate::{generate_dataset, generate_on_tape, Discretization, TapeDataset, MAX_RETRIES};
pub use normalize::{normalize_columns, normalize_dataset, normalize_vector, Normalizer, CLIP};
pub use space::{
    sample_generator, Activation, GeneratorHyperSpace, GeneratorInstance, IntRange, RealRange,
};
