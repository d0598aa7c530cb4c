use rand::Rng;

use super::{ClassifierHead, EmbeddingKind, Episode, ModelConfig, Prediction};
use crate::data::TaskKind;
use crate::rng::rng_from;
use crate::tensor::{Bound, Tape, Tensor, Var};
use crate::{Error, Result};

/// Gated mass below which a mixture row falls back to ungated weights.
pub const MIXTURE_EPS: f64 = 1e-9;
/// Probability floor inside the classification log-likelihood.
pub const NLL_EPS: f64 = 1e-9;
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Binary-Concrete samples with logistic noise drawn from `seed`.
    Sample { seed: u64 },
    /// `sigmoid(logit / lambda)` without noise.
    Deterministic,
}

/// Model inputs on a tape. Rows `0..split` are training rows.
pub struct Context<'t> {
    /// `n x d` normalized predictors.
    pub x: Var<'t>,
    /// Label-embedding input for the training rows, length `split`.
    pub y_train: Var<'t>,
    pub split: usize,
    pub task: TaskKind,
    /// Hard training labels (classification only).
    pub train_labels: Vec<usize>,
    pub num_classes: usize,
}

impl<'t> Context<'t> {
    /// Constant inputs for a plain episode.
    pub fn from_episode(tape: &'t Tape, ep: &Episode) -> Result<Self> {
        let ds = &ep.dataset;
        let l = ep.split;
        Ok(Self {
            x: tape.constant(Tensor::new(vec![ds.n, ds.d], ds.x.clone())?),
            y_train: tape.constant(Tensor::vector(ds.y[..l].to_vec())),
            split: l,
            task: ds.task,
            train_labels: match ds.task {
                TaskKind::Classification => ds.y[..l].iter().map(|&v| v as usize).collect(),
                TaskKind::Regression => Vec::new(),
            },
            num_classes: ds.num_classes,
        })
    }

    pub fn num_test(&self) -> usize {
        self.x.shape()[0] - self.split
    }
}

pub enum Output<'t> {
    /// `t x C` row-stochastic matrix.
    Classes(Var<'t>),
    Gaussian { mu: Var<'t>, sigma: Var<'t> },
}

impl<'t> Output<'t> {
    pub fn to_prediction(&self) -> Prediction {
        match self {
            Output::Classes(p) => {
                let shape = p.shape();
                Prediction::Classification {
                    probs: p.to_vec(),
                    rows: shape[0],
                    classes: shape[1],
                }
            }
            Output::Gaussian { mu, sigma } => Prediction::Regression {
                mu: mu.to_vec(),
                sigma: sigma.to_vec(),
            },
        }
    }
}

/// Test-row targets for the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

fn linear<'t>(x: Var<'t>, p: &Bound<'t>, weight: &str, bias: Option<&str>) -> Result<Var<'t>> {
    let y = x.matmul(p.get(weight))?;
    Ok(match bias {
        Some(b) => y.add(p.get(b))?,
        None => y,
    })
}

fn fit_width<'t>(x: Var<'t>, width: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    let (n, d) = (shape[0], shape[1]);
    if d == width {
        Ok(x)
    } else if d > width {
        Ok(x.narrow(1, 0, width)?)
    } else {
        let pad = x.tape().constant(Tensor::zeros(&[n, width - d]));
        Ok(Var::concat(&[x, pad], 1)?)
    }
}

fn patch_embed<'t>(cfg: &ModelConfig, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let (n, d) = (shape[0], shape[1]);
    let fw = cfg.feature_width;
    let patches = d.div_ceil(fw);
    let padded = fit_width(x, patches * fw)?.reshape(vec![n, patches, fw])?;
    let tokens = linear(padded, p, "embed.weight", Some("embed.bias"))?;
    let q = tokens.matmul(p.get("patch.q.weight"))?;
    let k = tokens.matmul(p.get("patch.k.weight"))?;
    let v = tokens.matmul(p.get("patch.v.weight"))?;
    let attn = q
        .matmul_t(k, false, true)?
        .mul_scalar(1.0 / (cfg.d_model as f64).sqrt())
        .softmax()
        .matmul(v)?;
    let mixed = tokens.add(linear(attn, p, "patch.o.weight", Some("patch.o.bias"))?)?;
    Ok(mixed.mean_axis(1)?)
}

/// Row tokens `n x d_model`: feature embedding plus, for training rows, the
/// label embedding. Test rows carry no label information.
pub fn embed<'t>(cfg: &ModelConfig, p: &Bound<'t>, ctx: &Context<'t>) -> Result<Var<'t>> {
    let shape = ctx.x.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Model(format!("expected an n x d matrix with d >= 1, got {shape:?}")));
    }
    let n = shape[0];
    let l = ctx.split;
    if l == 0 || l > n {
        return Err(Error::Model(format!("split {l} invalid for {n} rows")));
    }
    let rows = match cfg.embedding {
        EmbeddingKind::Dense => linear(
            fit_width(ctx.x, cfg.feature_width)?,
            p,
            "embed.weight",
            Some("embed.bias"),
        )?,
        EmbeddingKind::Patch => patch_embed(cfg, p, ctx.x)?,
    };
    let labels = linear(
        ctx.y_train.reshape(vec![l, 1])?,
        p,
        "label.weight",
        Some("label.bias"),
    )?;
    let train = rows.narrow(0, 0, l)?.add(labels)?;
    if l == n {
        return Ok(train);
    }
    Ok(Var::concat(&[train, rows.narrow(0, l, n - l)?], 0)?)
}

fn block<'t>(cfg: &ModelConfig, p: &Bound<'t>, b: usize, h: Var<'t>, l: usize) -> Result<Var<'t>> {
    let dh = cfg.head_dim();
    let name = |s: &str| format!("block{b}.{s}");
    let normed = h.layer_norm();
    let q = normed.matmul(p.get(&name("attn.q.weight")))?;
    let ctx = normed.narrow(0, 0, l)?;
    let k = ctx.matmul(p.get(&name("attn.k.weight")))?;
    let v = ctx.matmul(p.get(&name("attn.v.weight")))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let qh = q.narrow(1, i * dh, dh)?;
        let kh = k.narrow(1, i * dh, dh)?;
        let vh = v.narrow(1, i * dh, dh)?;
        let w = qh.matmul_t(kh, false, true)?.mul_scalar(scale).softmax();
        heads.push(w.matmul(vh)?);
    }
    let attn = linear(
        Var::concat(&heads, 1)?,
        p,
        &name("attn.o.weight"),
        Some(&name("attn.o.bias")),
    )?;
    let h = h.add(attn)?;
    let ff = linear(h.layer_norm(), p, &name("ff1.weight"), Some(&name("ff1.bias")))?.gelu();
    let ff = linear(ff, p, &name("ff2.weight"), Some(&name("ff2.bias")))?;
    Ok(h.add(ff)?)
}

/// Contextual embeddings `n x d_model`. Every row attends to the training
/// rows only, so a test row's output depends on itself and the training set.
pub fn encode<'t>(cfg: &ModelConfig, p: &Bound<'t>, ctx: &Context<'t>) -> Result<Var<'t>> {
    if ctx.split == 0 {
        return Err(Error::Model("empty training partition".into()));
    }
    let mut h = embed(cfg, p, ctx)?;
    for b in 0..cfg.blocks {
        h = block(cfg, p, b, h, ctx.split)?;
    }
    Ok(h.layer_norm())
}

fn logistic_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            u.ln() - (-u).ln_1p()
        })
        .collect()
}

/// Scatter-sum mixture head. For each (test, train) pair, one projection
/// pair gives softmax weights over training rows and another gives gate
/// logits. Gated weights are summed per training label and renormalized.
pub fn mixture_block<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    test: Var<'t>,
    train: Var<'t>,
    labels: &[usize],
    num_classes: usize,
    mode: GateMode,
) -> Result<Var<'t>> {
    let t = test.shape()[0];
    let l = train.shape()[0];
    if l == 0 || labels.len() != l {
        return Err(Error::Model(format!("{} labels for {l} training rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Model(format!("label {bad} outside 0..{num_classes}")));
    }
    let tape = test.tape();
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let pair = |qw: &str, kw: &str| -> Result<Var<'t>> {
        let q = test.matmul(p.get(qw))?;
        let k = train.matmul(p.get(kw))?;
        Ok(q.matmul_t(k, false, true)?.mul_scalar(scale))
    };
    let weights = pair("mixture.weight_q", "mixture.weight_k")?.softmax();
    let gate_logits = pair("mixture.gate_q", "mixture.gate_k")?
        .add(p.get("mixture.gate_bias").reshape(vec![])?)?;
    let inv_lambda = 1.0 / cfg.gate_temperature;
    let gates = match mode {
        GateMode::Sample { seed } => {
            let noise = tape.constant(Tensor::new(vec![t, l], logistic_noise(t * l, seed))?);
            gate_logits.add(noise)?.mul_scalar(inv_lambda).sigmoid()
        }
        GateMode::Deterministic => gate_logits.mul_scalar(inv_lambda).sigmoid(),
    };
    let mut gated = weights.mul(gates)?;

    let mass = gated.sum_axis(1)?.to_vec();
    let closed: Vec<bool> = mass.iter().map(|&m| !(m >= MIXTURE_EPS)).collect();
    if closed.iter().any(|&c| c) {
        log::debug!(
            "mixture gates closed on {} of {t} rows, using ungated weights",
            closed.iter().filter(|&&c| c).count()
        );
        let keep: Vec<f64> = closed
            .iter()
            .flat_map(|&c| std::iter::repeat(if c { 0.0 } else { 1.0 }).take(l))
            .collect();
        let fallback: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
        let keep = tape.constant(Tensor::new(vec![t, l], keep)?);
        let fallback = tape.constant(Tensor::new(vec![t, l], fallback)?);
        gated = gated.mul(keep)?.add(weights.mul(fallback)?)?;
    }

    let idx: Vec<usize> = (0..t)
        .flat_map(|i| labels.iter().map(move |&c| i * num_classes + c))
        .collect();
    let summed = gated.scatter_add(idx, vec![t, num_classes])?;
    Ok(summed.div_rows(summed.sum_axis(1)?)?)
}

/// Ablation head: a fixed number of logits, softmax over the first `C`.
pub fn dense_head<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    test: Var<'t>,
    num_classes: usize,
) -> Result<Var<'t>> {
    if num_classes > cfg.dense_classes {
        return Err(Error::Model(format!(
            "dense head supports at most {} classes, episode has {num_classes}",
            cfg.dense_classes
        )));
    }
    let logits = linear(test, p, "dense.weight", Some("dense.bias"))?;
    Ok(logits.narrow(1, 0, num_classes)?.softmax())
}

/// Per-row Gaussian mean and `sigma = softplus(raw) + 1e-4`.
pub fn gaussian_head<'t>(p: &Bound<'t>, test: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let t = test.shape()[0];
    let raw = linear(test, p, "gauss.weight", Some("gauss.bias"))?;
    let mu = raw.narrow(1, 0, 1)?.reshape(vec![t])?;
    let sigma = raw
        .narrow(1, 1, 1)?
        .reshape(vec![t])?
        .softplus()
        .add_scalar(SIGMA_FLOOR);
    Ok((mu, sigma))
}

/// Full forward pass for the test rows of `ctx`.
pub fn forward<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    ctx: &Context<'t>,
    mode: GateMode,
) -> Result<Output<'t>> {
    let n = ctx.x.shape()[0];
    let l = ctx.split;
    if l >= n {
        return Err(Error::Model(format!("no test rows (split {l} of {n})")));
    }
    let h = encode(cfg, p, ctx)?;
    let train = h.narrow(0, 0, l)?;
    let test = h.narrow(0, l, n - l)?;
    match ctx.task {
        TaskKind::Classification => {
            let probs = match cfg.classifier {
                ClassifierHead::Mixture => mixture_block(
                    cfg,
                    p,
                    test,
                    train,
                    &ctx.train_labels,
                    ctx.num_classes,
                    mode,
                )?,
                ClassifierHead::Dense => dense_head(cfg, p, test, ctx.num_classes)?,
            };
            Ok(Output::Classes(probs))
        }
        TaskKind::Regression => {
            let (mu, sigma) = gaussian_head(p, test)?;
            Ok(Output::Gaussian { mu, sigma })
        }
    }
}

/// Mean Gaussian negative log-likelihood of `y` under `N(mu, sigma^2)`.
pub fn gaussian_nll<'t>(mu: Var<'t>, sigma: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let z = y.sub(mu)?.div(sigma)?;
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    Ok(sigma
        .log()
        .add(z.square().mul_scalar(0.5))?
        .add_scalar(half_log_2pi)
        .mean())
}

/// Mean negative log-likelihood over the test rows. A class the head
/// cannot emit contributes `-ln(1e-9)`.
pub fn nll<'t>(out: &Output<'t>, targets: &Targets) -> Result<Var<'t>> {
    match (out, targets) {
        (Output::Classes(p), Targets::Classes(y)) => {
            let shape = p.shape();
            let (t, c) = (shape[0], shape[1]);
            if y.len() != t {
                return Err(Error::Model(format!("{} targets for {t} prediction rows", y.len())));
            }
            if let Some(&bad) = y.iter().find(|&&k| k >= c) {
                return Err(Error::Model(format!("target class {bad} outside 0..{c}")));
            }
            let idx = y.iter().enumerate().map(|(i, &k)| i * c + k).collect();
            Ok(p.gather(idx, vec![t])?.clip(NLL_EPS, 1.0).log().mean().neg())
        }
        (Output::Gaussian { mu, sigma }, Targets::Values(y)) => {
            if y.len() != mu.shape()[0] {
                return Err(Error::Model("target length differs from prediction rows".into()));
            }
            let y = mu.tape().constant(Tensor::vector(y.clone()));
            gaussian_nll(*mu, *sigma, y)
        }
        _ => Err(Error::Model("targets do not match the output kind".into())),
    }
}
