use std::ops::Range;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::roc_auc_ovo;
use crate::data::{Dataset, TaskKind};
use crate::model::{forward, Context, Episode, GateMode, ModelConfig, Prediction, Targets, NLL_EPS, SIGMA_FLOOR};
use crate::prior::Normalizer;
use crate::rng::{derive_rng, rng_from};
use crate::tensor::{ParamSet, Tape, Tensor};
use crate::{stats, Error, Result};

const TAG_FEATURES: u64 = 0xFEA7;
const TAG_BATCHES: u64 = 0xBA7C;
const TAG_ENSEMBLE: u64 = 0xE45E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Maximum number of feature columns; wider inputs are subsampled.
    pub feature_budget: usize,
    /// Maximum training rows per forward pass.
    pub batch_cap: usize,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            feature_budget: 100,
            batch_cap: 3000,
            seed: 0,
        }
    }
}

/// Column indices kept when `d` exceeds `budget`: a uniform subset without
/// replacement, in ascending order. Identity otherwise.
pub fn subsample_features(d: usize, budget: usize, rng: &mut impl Rng) -> Vec<usize> {
    if d <= budget {
        return (0..d).collect();
    }
    let mut idx = sample_indices(rng, d, budget).into_vec();
    idx.sort_unstable();
    idx
}

/// Contiguous partition of shuffled training rows into batches of at most
/// `cap` rows, weighted by size.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub cap: usize,
    /// Training-row order the ranges index into.
    pub order: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
    pub weights: Vec<f64>,
}

impl BatchPlan {
    pub fn new(n_train: usize, cap: usize, seed: u64) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::Data("no training rows".into()));
        }
        if cap == 0 {
            return Err(Error::Config("batch cap must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..n_train).collect();
        if n_train > cap {
            order.shuffle(&mut rng_from(seed));
        }
        let ranges: Vec<Range<usize>> = (0..n_train)
            .step_by(cap)
            .map(|s| s..(s + cap).min(n_train))
            .collect();
        let weights = ranges
            .iter()
            .map(|r| r.len() as f64 / n_train as f64)
            .collect();
        Ok(Self {
            cap,
            order,
            ranges,
            weights,
        })
    }

    pub fn rows(&self, b: usize) -> &[usize] {
        &self.order[self.ranges[b].clone()]
    }
}

fn context_for<'t>(tape: &'t Tape, train: &Dataset, test: &Dataset) -> Result<Context<'t>> {
    if train.n == 0 {
        return Err(Error::Data("prediction needs at least one training row".into()));
    }
    if train.d != test.d {
        return Err(Error::Data(format!(
            "train has {} features, test has {}",
            train.d, test.d
        )));
    }
    let mut x = Vec::with_capacity((train.n + test.n) * train.d);
    x.extend_from_slice(&train.x);
    x.extend_from_slice(&test.x);
    Ok(Context {
        x: tape.constant(Tensor::new(vec![train.n + test.n, train.d], x)?),
        y_train: tape.constant(Tensor::vector(train.y.clone())),
        split: train.n,
        task: train.task,
        train_labels: match train.task {
            TaskKind::Classification => train.labels(),
            TaskKind::Regression => Vec::new(),
        },
        num_classes: train.num_classes,
    })
}

/// One deterministic forward pass on already-normalized data. Regression
/// output stays on the normalized response scale.
pub fn predict_normalized(
    cfg: &ModelConfig,
    params: &ParamSet,
    train: &Dataset,
    test: &Dataset,
) -> Result<Prediction> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let ctx = context_for(&tape, train, test)?;
    Ok(forward(cfg, &vars, &ctx, GateMode::Deterministic)?.to_prediction())
}

pub fn predict_episode(cfg: &ModelConfig, params: &ParamSet, ep: &Episode) -> Result<Prediction> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let ctx = Context::from_episode(&tape, ep)?;
    Ok(forward(cfg, &vars, &ctx, GateMode::Deterministic)?.to_prediction())
}

/// Size-weighted mixture of per-batch class distributions.
pub fn combine_classification(preds: &[Prediction], weights: &[f64]) -> Result<Prediction> {
    let (rows, classes) = match preds.first() {
        Some(Prediction::Classification { rows, classes, .. }) => (*rows, *classes),
        _ => return Err(Error::Model("expected classification predictions".into())),
    };
    if weights.len() != preds.len() {
        return Err(Error::Model("one weight per batch required".into()));
    }
    let mut probs = vec![0.0; rows * classes];
    for (p, &w) in preds.iter().zip(weights) {
        match p {
            Prediction::Classification {
                probs: pb,
                rows: r,
                classes: c,
            } if *r == rows && *c == classes => {
                probs.iter_mut().zip(pb).for_each(|(a, &b)| *a += w * b);
            }
            _ => return Err(Error::Model("batch predictions disagree in shape".into())),
        }
    }
    Ok(Prediction::Classification {
        probs,
        rows,
        classes,
    })
}

/// Inverse-variance combination `sum(mu / s^2) / sum(1 / s^2)` per row; the
/// combined sigma is `sum(1 / s^2)^(-1/2)`.
pub fn combine_regression(preds: &[Prediction]) -> Result<Prediction> {
    let rows = preds.first().map(Prediction::rows).unwrap_or(0);
    let mut mu = vec![0.0; rows];
    let mut sigma = vec![0.0; rows];
    for i in 0..rows {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut floor_weight = 0.0;
        for p in preds {
            match p {
                Prediction::Regression { mu: m, sigma: s } if m.len() == rows => {
                    let w = 1.0 / (s[i] * s[i]);
                    num += w * m[i];
                    den += w;
                    if s[i] <= SIGMA_FLOOR * (1.0 + 1e-9) {
                        floor_weight += w;
                    }
                }
                _ => return Err(Error::Model("expected regression predictions of equal length".into())),
            }
        }
        if preds.len() > 1 && floor_weight / den > 0.99 {
            log::warn!("row {i}: batches at the sigma floor carry {:.3} of the weight", floor_weight / den);
        }
        mu[i] = num / den;
        sigma[i] = den.sqrt().recip();
    }
    Ok(Prediction::Regression { mu, sigma })
}

/// Predicts normalized data with the training rows split by `plan`.
pub fn predict_batched(
    cfg: &ModelConfig,
    params: &ParamSet,
    train: &Dataset,
    test: &Dataset,
    plan: &BatchPlan,
) -> Result<Prediction> {
    if plan.ranges.len() == 1 && plan.order.iter().enumerate().all(|(i, &r)| i == r) {
        return predict_normalized(cfg, params, train, test);
    }
    let preds = (0..plan.ranges.len())
        .map(|b| predict_normalized(cfg, params, &train.select_rows(plan.rows(b)), test))
        .collect::<Result<Vec<_>>>()?;
    match train.task {
        TaskKind::Classification => combine_classification(&preds, &plan.weights),
        TaskKind::Regression => combine_regression(&preds),
    }
}

fn denormalize(pred: Prediction, norm: &Normalizer) -> Prediction {
    match pred {
        Prediction::Regression { mu, sigma } => Prediction::Regression {
            mu: mu.into_iter().map(|m| norm.denormalize_y(m)).collect(),
            sigma: sigma.into_iter().map(|s| s * norm.y_scale()).collect(),
        },
        other => other,
    }
}

/// Zero-shot prediction from raw data: feature subsampling, normalization
/// with training statistics, batched forward passes when the training set
/// exceeds the cap. Regression outputs are on the original response scale.
pub fn predict(
    cfg: &ModelConfig,
    params: &ParamSet,
    train: &Dataset,
    test: &Dataset,
    opts: &PredictOptions,
) -> Result<Prediction> {
    if train.n == 0 {
        return Err(Error::Data("prediction needs at least one training row".into()));
    }
    let cols = subsample_features(train.d, opts.feature_budget, &mut derive_rng(opts.seed, &[TAG_FEATURES]));
    let (train, test) = if cols.len() < train.d {
        (train.select_columns(&cols), test.select_columns(&cols))
    } else {
        (train.clone(), test.clone())
    };
    let norm = if train.n >= 2 {
        Normalizer::fit(&train)?
    } else {
        Normalizer {
            means: train.x.clone(),
            stds: vec![0.0; train.d],
            y_stats: (train.task == TaskKind::Regression).then(|| (train.y[0], 0.0)),
        }
    };
    let train_n = norm.apply(&train)?;
    let mut test_n = norm.apply(&test)?;
    test_n.y = vec![0.0; test_n.n];
    let plan = BatchPlan::new(train.n, opts.batch_cap, derive_rng(opts.seed, &[TAG_BATCHES]).gen())?;
    let pred = predict_batched(cfg, params, &train_n, &test_n, &plan)?;
    Ok(denormalize(pred, &norm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub prediction: Prediction,
    /// Mean over rows and outputs of the variance across members.
    pub member_variance: f64,
}

/// Average of predictions under `k` feature-column permutations applied to
/// both train and test. Member 0 uses the identity permutation.
pub fn permutation_ensemble(
    cfg: &ModelConfig,
    params: &ParamSet,
    train: &Dataset,
    test: &Dataset,
    k: usize,
    opts: &PredictOptions,
) -> Result<Ensemble> {
    if k == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    let mut rng = derive_rng(opts.seed, &[TAG_ENSEMBLE]);
    let mut members = Vec::with_capacity(k);
    for i in 0..k {
        let mut perm: Vec<usize> = (0..train.d).collect();
        if i > 0 {
            perm.shuffle(&mut rng);
        }
        members.push(predict(
            cfg,
            params,
            &train.select_columns(&perm),
            &test.select_columns(&perm),
            opts,
        )?);
    }
    let outputs: Vec<Vec<f64>> = members
        .iter()
        .map(|p| match p {
            Prediction::Classification { probs, .. } => probs.clone(),
            Prediction::Regression { mu, .. } => mu.clone(),
        })
        .collect();
    let len = outputs[0].len();
    let member_variance = if len == 0 {
        0.0
    } else {
        (0..len)
            .map(|j| stats::variance(&outputs.iter().map(|o| o[j]).collect::<Vec<_>>()))
            .sum::<f64>()
            / len as f64
    };
    let w = vec![1.0 / k as f64; k];
    let prediction = match &members[0] {
        Prediction::Classification { .. } => combine_classification(&members, &w)?,
        Prediction::Regression { .. } => {
            let rows = members[0].rows();
            let mut mu = vec![0.0; rows];
            let mut second = vec![0.0; rows];
            for p in &members {
                if let Prediction::Regression { mu: m, sigma: s } = p {
                    for i in 0..rows {
                        mu[i] += m[i] / k as f64;
                        second[i] += (s[i] * s[i] + m[i] * m[i]) / k as f64;
                    }
                }
            }
            let sigma = (0..rows)
                .map(|i| (second[i] - mu[i] * mu[i]).max(0.0).sqrt())
                .collect();
            Prediction::Regression { mu, sigma }
        }
    };
    Ok(Ensemble {
        prediction,
        member_variance,
    })
}

/// Mean test-row negative log-likelihood of a plain-value prediction.
pub fn prediction_nll(pred: &Prediction, targets: &Targets) -> Result<f64> {
    let rows = pred.rows();
    let total: f64 = match (pred, targets) {
        (Prediction::Classification { .. }, Targets::Classes(y)) if y.len() == rows => y
            .iter()
            .enumerate()
            .map(|(i, &c)| -pred.row(i).get(c).copied().unwrap_or(0.0).clamp(NLL_EPS, 1.0).ln())
            .sum(),
        (Prediction::Regression { mu, sigma }, Targets::Values(y)) if y.len() == rows => (0..rows)
            .map(|i| {
                let z = (y[i] - mu[i]) / sigma[i];
                sigma[i].ln() + 0.5 * z * z + 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum(),
        _ => return Err(Error::Model("targets do not match the prediction".into())),
    };
    Ok(total / rows as f64)
}

/// Mean OVO AUC over the classification episodes (those whose test rows
/// hold at least two classes) and mean NLL over all episodes.
pub fn score_episodes(
    cfg: &ModelConfig,
    params: &ParamSet,
    episodes: &[Episode],
) -> Result<(Option<f64>, f64)> {
    let mut aucs = Vec::new();
    let mut nlls = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let pred = predict_episode(cfg, params, ep)?;
        let targets = ep.targets();
        nlls.push(prediction_nll(&pred, &targets)?);
        if let (Prediction::Classification { probs, classes, .. }, Targets::Classes(y)) = (&pred, &targets) {
            if let Ok(a) = roc_auc_ovo(probs, *classes, y) {
                aucs.push(a);
            }
        }
    }
    let auc = (!aucs.is_empty()).then(|| stats::mean(&aucs));
    Ok((auc, stats::mean(&nlls)))
}
