use serde::{Deserialize, Serialize};

use crate::agents::adversarial_datasets;
use crate::data::Dataset;
use crate::prior::IntRange;
use crate::rng::derive_seed;
use crate::tensor::ParamSet;
use crate::train::{ordinary_episode, RunConfig};
use crate::{stats, Error, Result};

const TAG_ORDINARY: u64 = 0x0D1;
const TAG_ORDINARY_PRIME: u64 = 0x0D2;
const TAG_ADVERSARIAL: u64 = 0xAD5;

pub const GRID_BINS: usize = 64;
pub const GRID_LIMIT: f64 = 4.0;
pub const SMOOTHING: f64 = 1e-3;

/// Counts of 2-D points on a square grid. Points outside the support fall
/// into the nearest edge bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<f64>,
    pub total: f64,
}

impl Histogram2d {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Config("histogram needs bins > 0 and hi > lo".into()));
        }
        Ok(Self {
            bins,
            lo,
            hi,
            counts: vec![0.0; bins * bins],
            total: 0.0,
        })
    }

    pub fn standard() -> Self {
        Self::new(GRID_BINS, -GRID_LIMIT, GRID_LIMIT).expect("static grid")
    }

    fn bin(&self, v: f64) -> usize {
        let t = ((v - self.lo) / (self.hi - self.lo) * self.bins as f64).floor();
        if t.is_nan() {
            return 0;
        }
        (t.max(0.0) as usize).min(self.bins - 1)
    }

    pub fn add(&mut self, x: f64, y: f64) {
        let (i, j) = (self.bin(x), self.bin(y));
        self.counts[i * self.bins + j] += 1.0;
        self.total += 1.0;
    }

    /// First two feature columns of every row.
    pub fn add_dataset(&mut self, ds: &Dataset) -> Result<()> {
        if ds.d != 2 {
            return Err(Error::Data(format!("diversity analysis needs 2 features, got {}", ds.d)));
        }
        for r in 0..ds.n {
            self.add(ds.get(r, 0), ds.get(r, 1));
        }
        Ok(())
    }

    /// Smoothed bin probabilities `(c + alpha) / (N + alpha * B^2)`.
    pub fn density(&self, alpha: f64) -> Vec<f64> {
        let denom = self.total + alpha * self.counts.len() as f64;
        self.counts.iter().map(|c| (c + alpha) / denom).collect()
    }

    /// `KL(self || other)` between smoothed densities.
    pub fn kl(&self, other: &Self, alpha: f64) -> Result<f64> {
        if self.bins != other.bins || self.lo != other.lo || self.hi != other.hi {
            return Err(Error::Data("histograms are on different grids".into()));
        }
        let (p, q) = (self.density(alpha), other.density(alpha));
        Ok(p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// One histogram over all points of each collection.
    Pooled,
    /// Average of per-pair KL between the i-th datasets of each collection.
    PerDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: stats::mean(xs),
            std: stats::sample_std(xs),
            count: xs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mode: KlMode,
    /// `KL(a || b)`; the std is zero in pooled mode.
    pub kl: Summary,
    pub pearson_a: Summary,
    pub pearson_b: Summary,
    pub density_a: Histogram2d,
    pub density_b: Histogram2d,
}

/// Mean absolute Pearson correlation between each non-constant feature and
/// the response; `None` when no feature qualifies.
pub fn pearson_strength(ds: &Dataset) -> Option<f64> {
    let rs: Vec<f64> = (0..ds.d)
        .filter_map(|j| stats::pearson(&ds.column(j), &ds.y))
        .map(f64::abs)
        .collect();
    (!rs.is_empty()).then(|| stats::mean(&rs))
}

pub fn prior_diversity_report(a: &[Dataset], b: &[Dataset], mode: KlMode) -> Result<DiversityReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("diversity analysis needs non-empty collections".into()));
    }
    let pooled = |c: &[Dataset]| -> Result<Histogram2d> {
        let mut h = Histogram2d::standard();
        for ds in c {
            h.add_dataset(ds)?;
        }
        Ok(h)
    };
    let (density_a, density_b) = (pooled(a)?, pooled(b)?);
    let kl = match mode {
        KlMode::Pooled => Summary {
            mean: density_a.kl(&density_b, SMOOTHING)?,
            std: 0.0,
            count: 1,
        },
        KlMode::PerDataset => {
            if a.len() != b.len() {
                return Err(Error::Data("per-dataset KL needs equally sized collections".into()));
            }
            let kls = a
                .iter()
                .zip(b)
                .map(|(x, y)| pooled(std::slice::from_ref(x))?.kl(&pooled(std::slice::from_ref(y))?, SMOOTHING))
                .collect::<Result<Vec<_>>>()?;
            Summary::of(&kls)
        }
    };
    let pearson = |c: &[Dataset]| Summary::of(&c.iter().filter_map(pearson_strength).collect::<Vec<_>>());
    Ok(DiversityReport {
        mode,
        kl,
        pearson_a: pearson(a),
        pearson_b: pearson(b),
        density_a,
        density_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAnalysis {
    pub datasets: usize,
    pub agents: usize,
    pub agent_steps: usize,
    pub ordinary_vs_ordinary: DiversityReport,
    pub ordinary_vs_adversarial: DiversityReport,
}

/// `count` two-feature datasets from fresh ordinary generators.
pub fn ordinary_datasets(run: &RunConfig, seed: u64, count: usize) -> Result<Vec<Dataset>> {
    let space = two_feature_space(run);
    (0..count as u64)
        .map(|i| Ok(ordinary_episode(&space, seed, 0, i)?.0.dataset))
        .collect()
}

fn two_feature_space(run: &RunConfig) -> crate::prior::GeneratorHyperSpace {
    let mut space = run.effective_prior();
    space.features = IntRange::new(2, 2);
    space
}

/// Compares two independent ordinary collections, and an ordinary
/// collection with one emitted by `agents` agents ascending against the
/// model in `params` for `agent_steps` steps each.
pub fn analyze_prior(
    run: &RunConfig,
    params: &ParamSet,
    count: usize,
    agents: usize,
    agent_steps: usize,
    mode: KlMode,
) -> Result<PriorAnalysis> {
    let seed = run.train.seed;
    let a = ordinary_datasets(run, derive_seed(seed, &[TAG_ORDINARY]), count)?;
    let b = ordinary_datasets(run, derive_seed(seed, &[TAG_ORDINARY_PRIME]), count)?;
    let adv = adversarial_datasets(
        &run.model,
        params,
        &two_feature_space(run),
        &run.train.agents,
        derive_seed(seed, &[TAG_ADVERSARIAL]),
        count,
        agents,
        agent_steps,
    )?;
    Ok(PriorAnalysis {
        datasets: count,
        agents,
        agent_steps,
        ordinary_vs_ordinary: prior_diversity_report(&a, &b, mode)?,
        ordinary_vs_adversarial: prior_diversity_report(&a, &adv, mode)?,
    })
}
