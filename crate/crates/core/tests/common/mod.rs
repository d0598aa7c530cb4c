#![allow(dead_code)]

pub mod grad_suite;

use tabmeta_core::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale of
/// `FD_REL_TOL * FD_SCALE_FLOOR`.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_SCALE_FLOOR)
}

/// Central finite differences of a scalar function of several tensors.
/// Only the coordinates listed in `coords` (input, flat index) are probed.
pub fn finite_diff<F>(inputs: &[Tensor], coords: &[(usize, usize)], f: &F) -> Vec<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let eval = |ins: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    coords
        .iter()
        .map(|&(i, j)| {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Reverse-mode gradients of the same function, flattened per input.
pub fn analytic<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let g = tape.backward(loss).expect("backward");
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| g.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Worst relative error over every coordinate of every input.
pub fn max_grad_err<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    max_grad_err_at(inputs, &coords, f)
}

pub fn max_grad_err_at<F>(inputs: &[Tensor], coords: &[(usize, usize)], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let a = analytic(inputs, f);
    let n = finite_diff(inputs, coords, f);
    coords
        .iter()
        .zip(&n)
        .map(|(&(i, j), &nv)| rel_err(a[i][j], nv))
        .fold(0.0, f64::max)
}

/// Pins a closure to the higher-ranked signature the checkers expect.
pub fn graph<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

pub mod fixtures {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use tabmeta_core::data::{Dataset, TaskKind};
    use tabmeta_core::model::{Episode, ModelConfig};
    use tabmeta_core::prior::normalize_dataset;
    use tabmeta_core::rng::rng_from;

    pub fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            ff_width: 16,
            feature_width: 4,
            ..ModelConfig::default()
        }
    }

    /// Gaussian predictors with uniform random labels in `0..classes`, or a
    /// noisy linear response when `classes == 0`.
    pub fn random_episode(seed: u64, n: usize, d: usize, split: usize, classes: usize) -> Episode {
        let mut rng = rng_from(seed);
        let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (y, task) = if classes > 0 {
            let mut y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..classes) as f64).collect();
            y[0] = 0.0;
            y[1] = 1.0;
            (y, TaskKind::Classification)
        } else {
            let y = (0..n)
                .map(|i| x[i * d] + 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            (y, TaskKind::Regression)
        };
        let ds = Dataset::new(n, d, x, y, task, classes.max(if classes > 0 { 2 } else { 0 })).unwrap();
        Episode::new(normalize_dataset(&ds).unwrap(), split).unwrap()
    }

    /// Two Gaussian features with labels from a random linear boundary,
    /// normalized, split 80-20.
    pub fn linear_episode(seed: u64, n: usize) -> Episode {
        let mut rng = rng_from(seed);
        let w: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        let b: f64 = rng.gen_range(-0.5..0.5);
        let mut x = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        while y.len() < n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let c: f64 = StandardNormal.sample(&mut rng);
            x.extend([a, c]);
            y.push(if w[0] * a + w[1] * c + b > 0.0 { 1.0 } else { 0.0 });
        }
        if y.iter().all(|&v| v == y[0]) {
            y[0] = 1.0 - y[0];
        }
        let ds = Dataset::new(n, 2, x, y, TaskKind::Classification, 2).unwrap();
        Episode::new(normalize_dataset(&ds).unwrap(), n * 4 / 5).unwrap()
    }
}

pub mod composite {
    use rand::Rng;
    use tabmeta_core::agents::{agent_forward, AgentConfig, AgentState};
    use tabmeta_core::model::{forward, nll, Context, EmbeddingKind, GateMode, ModelConfig};
    use tabmeta_core::prior::{GeneratorHyperSpace, IntRange};
    use tabmeta_core::rng::rng_from;
    use tabmeta_core::tensor::{ParamSet, Tape};

    use super::fixtures::{random_episode, tiny_model};
    use super::{rel_err, FD_STEP};

    pub const PROBES: usize = 8;

    fn probe_coords(params: &ParamSet, rng: &mut impl Rng, k: usize) -> Vec<(String, usize)> {
        let all: Vec<(String, usize)> = params
            .iter()
            .map(|p| (p.name.clone(), p.value.numel()))
            .collect();
        (0..k)
            .map(|_| {
                let (name, len) = &all[rng.gen_range(0..all.len())];
                (name.clone(), rng.gen_range(0..*len))
            })
            .collect()
    }

    fn nudged(params: &ParamSet, name: &str, j: usize, h: f64) -> ParamSet {
        let mut p = params.clone();
        p.get_mut(name).unwrap().data_mut()[j] += h;
        p
    }

    /// Worst relative error between the reverse-mode gradient of the
    /// episode NLL and central differences over random model coordinates,
    /// and the largest probed gradient magnitude.
    pub fn model_nll_grad_err(seed: u64) -> (f64, f64) {
        let mut rng = rng_from(seed);
        let cfg = ModelConfig {
            embedding: if seed % 2 == 0 { EmbeddingKind::Dense } else { EmbeddingKind::Patch },
            ..tiny_model()
        };
        let params = cfg.init(seed).unwrap();
        let classes = [0, 2, 3][seed as usize % 3];
        let ep = random_episode(seed, 14, 1 + seed as usize % 6, 9, classes);
        let mode = GateMode::Sample { seed };
        let loss = |p: &ParamSet| {
            let tape = Tape::new();
            let vars = p.bind(&tape, false);
            let ctx = Context::from_episode(&tape, &ep).unwrap();
            nll(&forward(&cfg, &vars, &ctx, mode).unwrap(), &ep.targets()).unwrap().item()
        };
        let tape = Tape::new();
        let vars = params.bind(&tape, true);
        let ctx = Context::from_episode(&tape, &ep).unwrap();
        let l = nll(&forward(&cfg, &vars, &ctx, mode).unwrap(), &ep.targets()).unwrap();
        let grads = tape.backward(l).unwrap();
        probe_coords(&params, &mut rng, PROBES)
            .into_iter()
            .map(|(name, j)| {
                let idx = params.iter().position(|p| p.name == name).unwrap();
                let a = grads.get(vars.vars()[idx]).map_or(0.0, |g| g[j]);
                let n = (loss(&nudged(&params, &name, j, FD_STEP)) - loss(&nudged(&params, &name, j, -FD_STEP)))
                    / (2.0 * FD_STEP);
                (rel_err(a, n), a.abs())
            })
            .fold((0.0, 0.0), |(e, g), (a, b)| (e.max(a), g.max(b)))
    }

    pub fn agent_space() -> GeneratorHyperSpace {
        GeneratorHyperSpace {
            features: IntRange::new(1, 4),
            samples: IntRange::new(16, 24),
            width: IntRange::new(6, 10),
            classification_prob: 0.5,
            ..GeneratorHyperSpace::default()
        }
    }

    /// Same check for the agent generator weights, through generation,
    /// soft discretization and normalization.
    pub fn agent_nll_grad_err(seed: u64) -> (f64, f64) {
        let mut rng = rng_from(seed ^ 0xA5A5);
        let cfg = tiny_model();
        let params = cfg.init(seed).unwrap();
        let space = agent_space();
        let agent = AgentState::new(&space, &AgentConfig::default(), seed, 0, 0).unwrap();
        let episode_seed = seed.wrapping_mul(31) + 7;
        let loss = |a: &ParamSet| {
            let mut ag = agent.clone();
            ag.generator.params = a.clone();
            let tape = Tape::new();
            let mv = params.bind(&tape, false);
            let av = ag.generator.params.bind(&tape, false);
            agent_forward(&tape, &cfg, &mv, &ag, &av, episode_seed).unwrap().nll.item()
        };
        let tape = Tape::new();
        let mv = params.bind(&tape, false);
        let av = agent.params().bind(&tape, true);
        let ep = agent_forward(&tape, &cfg, &mv, &agent, &av, episode_seed).unwrap();
        let grads = tape.backward(ep.nll).unwrap();
        probe_coords(agent.params(), &mut rng, PROBES)
            .into_iter()
            .map(|(name, j)| {
                let idx = agent.params().iter().position(|p| p.name == name).unwrap();
                let a = grads.get(av.vars()[idx]).map_or(0.0, |g| g[j]);
                let n = (loss(&nudged(agent.params(), &name, j, FD_STEP))
                    - loss(&nudged(agent.params(), &name, j, -FD_STEP)))
                    / (2.0 * FD_STEP);
                (rel_err(a, n), a.abs())
            })
            .fold((0.0, 0.0), |(e, g), (a, b)| (e.max(a), g.max(b)))
    }
}
