//! Adversarial data agents: generators whose MLP weights ascend the
//! meta-learner's loss on the data they emit, reset on a fixed period.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskKind};
use crate::model::{self, Context, GateMode, ModelConfig, Output, Targets};
use crate::prior::{generate_on_tape, sample_generator, Discretization, GeneratorHyperSpace, GeneratorInstance};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{ascend_step, descend_step, Gradients, ParamSet, Tape, Var};
use crate::train::sample_split;
use crate::{Error, Result};

const TAG_AGENT: u64 = 0xA6E7;
const TAG_COLLECTION: u64 = 0xC011;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Share of generator slots that are adversarial.
    pub fraction: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Soft-discretization temperature.
    pub temperature: f64,
    /// Optimizer steps between resets.
    pub reset_period: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            fraction: 0.125,
            lr: 1e-1,
            weight_decay: 1e-5,
            temperature: 1e-2,
            reset_period: 2000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!("agent fraction {} outside [0, 1]", self.fraction)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("agent temperature must be positive".into()));
        }
        if self.reset_period == 0 {
            return Err(Error::Config("agent reset period must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("agent lr and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Why an agent was re-sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetReason {
    Period,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub slot: usize,
    pub generator: GeneratorInstance,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub steps_since_reset: u64,
    pub reset_period: u64,
    /// Number of resets so far; part of the seed path of the next instance.
    pub generation: u64,
    /// Row count of every episode this instance emits.
    pub rows: usize,
}

impl AgentState {
    /// Samples the generation-`generation` instance of slot `slot`.
    pub fn new(
        space: &GeneratorHyperSpace,
        cfg: &AgentConfig,
        run_seed: u64,
        slot: usize,
        generation: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let seed = derive_seed(run_seed, &[TAG_AGENT, slot as u64, generation]);
        let mut generator = sample_generator(space, seed)?;
        for spec in generator.feature_specs.iter_mut().flatten() {
            spec.temperature = cfg.temperature;
        }
        if let Some(spec) = generator.response_spec.as_mut() {
            spec.temperature = cfg.temperature;
        }
        let rows = generator.default_samples;
        Ok(Self {
            slot,
            generator,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            temperature: cfg.temperature,
            steps_since_reset: 0,
            reset_period: cfg.reset_period,
            generation,
            rows,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.generator.params
    }

    /// Re-samples the instance and all its random factors.
    pub fn reset(&mut self, space: &GeneratorHyperSpace, cfg: &AgentConfig, run_seed: u64) -> Result<()> {
        *self = Self::new(space, cfg, run_seed, self.slot, self.generation + 1)?;
        Ok(())
    }

    /// Advances the reset clock by one optimizer step and resets when it
    /// reaches the period. Returns whether a reset happened.
    pub fn maybe_reset(
        &mut self,
        space: &GeneratorHyperSpace,
        cfg: &AgentConfig,
        run_seed: u64,
    ) -> Result<bool> {
        self.steps_since_reset += 1;
        if self.steps_since_reset >= self.reset_period {
            self.reset(space, cfg, run_seed)?;
            return Ok(true);
        }
        Ok(false)
    }
}

/// Slot layout: the first `round(fraction * m)` slots are adversarial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPool {
    pub slots: usize,
    pub agents: Vec<AgentState>,
}

impl AgentPool {
    pub fn adversarial_count(slots: usize, fraction: f64) -> usize {
        ((fraction * slots as f64).round() as usize).min(slots)
    }

    pub fn new(
        slots: usize,
        space: &GeneratorHyperSpace,
        cfg: &AgentConfig,
        run_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = Self::adversarial_count(slots, cfg.fraction);
        let agents = (0..k)
            .map(|s| AgentState::new(space, cfg, run_seed, s, 0))
            .collect::<Result<_>>()?;
        Ok(Self { slots, agents })
    }

    pub fn is_adversarial(&self, slot: usize) -> bool {
        slot < self.agents.len()
    }

    pub fn restore(&mut self) {
        for a in &mut self.agents {
            a.generator.reindex();
        }
    }
}

/// One agent episode on a tape, with both parameter sets bound as leaves.
pub struct AgentEpisode<'t> {
    pub output: Output<'t>,
    /// Mean NLL of the test rows (the quantity the model descends).
    pub nll: Var<'t>,
    pub split: usize,
    /// Plain values of the generated episode.
    pub dataset: Dataset,
}

/// Generates an episode from `agent` with soft discretization and runs the
/// model on it. Gradients flow from the loss back into both the model
/// parameters bound in `model_vars` and the agent weights in `agent_vars`.
pub fn agent_forward<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    model_vars: &crate::tensor::Bound<'t>,
    agent: &AgentState,
    agent_vars: &crate::tensor::Bound<'t>,
    episode_seed: u64,
) -> Result<AgentEpisode<'t>> {
    let g = &agent.generator;
    let data = generate_on_tape(
        tape,
        g,
        agent_vars,
        agent.rows,
        derive_seed(episode_seed, &[0]),
        Discretization::Soft,
    )?;
    let dataset = data.dataset;
    let n = dataset.n;
    let split = sample_split(n, &mut derive_rng(episode_seed, &[1]))?;
    let ctx = Context {
        x: data.x,
        y_train: data.y.narrow(0, 0, split)?,
        split,
        task: g.task,
        train_labels: dataset.y[..split].iter().map(|&v| v as usize).collect(),
        num_classes: dataset.num_classes,
    };
    let output = model::forward(cfg, model_vars, &ctx, GateMode::Sample {
        seed: derive_seed(episode_seed, &[2]),
    })?;
    let nll = match g.task {
        TaskKind::Classification => {
            let y = dataset.y[split..].iter().map(|&v| v as usize).collect();
            model::nll(&output, &Targets::Classes(y))?
        }
        TaskKind::Regression => match &output {
            Output::Gaussian { mu, sigma } => {
                model::gaussian_nll(*mu, *sigma, data.y.narrow(0, split, n - split)?)?
            }
            Output::Classes(_) => return Err(Error::Model("regression episode produced classes".into())),
        },
    };
    Ok(AgentEpisode {
        output,
        nll,
        split,
        dataset,
    })
}

/// The agent objective: mean test-row log-likelihood under the model, i.e.
/// the negated NLL. Errors when the episode carries no gradient path to the
/// agent weights.
pub fn agent_loss<'t>(episode: &AgentEpisode<'t>) -> Result<Var<'t>> {
    if !episode.nll.requires_grad() {
        return Err(Error::Model("agent episode is disconnected from the agent weights".into()));
    }
    Ok(episode.nll.neg())
}

/// Flat gradient buffers for every leaf of `params`, zeros where a leaf
/// received nothing.
pub fn collect_grads(params: &ParamSet, bound: &crate::tensor::Bound<'_>, grads: &Gradients) -> Vec<Vec<f64>> {
    params
        .iter()
        .zip(bound.vars())
        .map(|(p, v)| match grads.get(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; p.value.numel()],
        })
        .collect()
}

/// Outcome of [`joint_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub nll: f64,
    pub reset: Option<ResetReason>,
}

/// One backward pass through an agent episode, then plain descent on the
/// model (`lr_model`) and ascent on the agent with its own lr and weight
/// decay. A failure in the agent's part (non-finite data or gradients)
/// resets the agent and leaves the model untouched.
pub fn joint_update(
    agent: &mut AgentState,
    cfg: &ModelConfig,
    model_params: &mut ParamSet,
    lr_model: f64,
    episode_seed: u64,
    reset: (&GeneratorHyperSpace, &AgentConfig, u64),
) -> Result<JointOutcome> {
    let pass = (|| -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let mv = model_params.bind(&tape, true);
        let av = agent.generator.params.bind(&tape, true);
        let ep = agent_forward(&tape, cfg, &mv, agent, &av, episode_seed)?;
        let grads = tape.backward(ep.nll)?;
        Ok((
            ep.nll.item(),
            collect_grads(model_params, &mv, &grads),
            collect_grads(&agent.generator.params, &av, &grads),
        ))
    })();
    let (nll, model_grads, agent_grads) = match pass {
        Ok(v) if v.0.is_finite() => v,
        Ok(_) | Err(Error::Tensor(_)) | Err(Error::Generator(_)) => {
            log::warn!("agent slot {} produced non-finite values, resetting", agent.slot);
            agent.reset(reset.0, reset.1, reset.2)?;
            return Ok(JointOutcome {
                nll: f64::NAN,
                reset: Some(ResetReason::NonFinite),
            });
        }
        Err(e) => return Err(e),
    };
    model_params.zero_grad();
    model_params.accumulate_flat(&model_grads, 1.0);
    descend_step(model_params, lr_model)?;
    model_params.zero_grad();
    agent.generator.params.zero_grad();
    agent.generator.params.accumulate_flat(&agent_grads, 1.0);
    ascend_step(&mut agent.generator.params, agent.lr, agent.weight_decay)?;
    agent.generator.params.zero_grad();
    Ok(JointOutcome { nll, reset: None })
}

/// Model NLL on the episode `agent` emits for `episode_seed`.
pub fn episode_nll(agent: &AgentState, cfg: &ModelConfig, model_params: &ParamSet, episode_seed: u64) -> Result<f64> {
    let tape = Tape::new();
    let mv = model_params.bind(&tape, false);
    let av = agent.params().bind(&tape, false);
    Ok(agent_forward(&tape, cfg, &mv, agent, &av, episode_seed)?.nll.item())
}

/// One ascent step of the agent alone against a frozen model, with the
/// agent's weight decay and learning rate `lr`. Returns the NLL before the
/// step and the episode data it was computed on.
pub fn ascend_against(
    agent: &mut AgentState,
    cfg: &ModelConfig,
    model_params: &ParamSet,
    episode_seed: u64,
    lr: f64,
) -> Result<(f64, Dataset)> {
    let tape = Tape::new();
    let mv = model_params.bind(&tape, false);
    let av = agent.generator.params.bind(&tape, true);
    let ep = agent_forward(&tape, cfg, &mv, agent, &av, episode_seed)?;
    let nll = ep.nll.item();
    if !nll.is_finite() {
        return Err(Error::Generator("agent episode NLL is not finite".into()));
    }
    let grads = tape.backward(ep.nll)?;
    let flat = collect_grads(&agent.generator.params, &av, &grads);
    agent.generator.params.zero_grad();
    agent.generator.params.accumulate_flat(&flat, 1.0);
    ascend_step(&mut agent.generator.params, lr, agent.weight_decay)?;
    agent.generator.params.zero_grad();
    if !agent.generator.params.values_finite() {
        return Err(Error::Generator("agent weights became non-finite".into()));
    }
    Ok((nll, ep.dataset))
}

/// The soft-discretized, normalized dataset `agent` emits for `seed`.
pub fn emit_dataset(agent: &AgentState, seed: u64) -> Result<Dataset> {
    let tape = Tape::new();
    let av = agent.params().bind(&tape, false);
    let data = generate_on_tape(&tape, &agent.generator, &av, agent.rows, derive_seed(seed, &[0]), Discretization::Soft)?;
    Ok(data.dataset)
}

/// `count` datasets emitted by a pool of `agents` agents, each ascending
/// against the frozen model for `steps` steps (at least its share of
/// `count`). Each agent contributes the episodes of its last steps. A
/// failing agent is reset and continues with its next generation.
pub fn adversarial_datasets(
    cfg: &ModelConfig,
    model_params: &ParamSet,
    space: &GeneratorHyperSpace,
    agent_cfg: &AgentConfig,
    seed: u64,
    count: usize,
    agents: usize,
    steps: usize,
) -> Result<Vec<Dataset>> {
    if agents == 0 {
        return Err(Error::Config("adversarial collection needs at least one agent".into()));
    }
    let per_agent = count.div_ceil(agents);
    let steps = steps.max(per_agent);
    let per_slot: Vec<Vec<Dataset>> = (0..agents)
        .into_par_iter()
        .map(|slot| {
            let mut agent = AgentState::new(space, agent_cfg, seed, slot, 0)?;
            let mut kept = Vec::with_capacity(per_agent);
            let mut failures = 0;
            for s in 0..steps {
                let es = derive_seed(seed, &[TAG_COLLECTION, slot as u64, s as u64]);
                let lr = agent.lr;
                match ascend_against(&mut agent, cfg, model_params, es, lr) {
                    Ok((_, ds)) => {
                        if s + per_agent >= steps {
                            kept.push(ds);
                        }
                    }
                    Err(e @ (Error::Generator(_) | Error::Tensor(_))) => {
                        failures += 1;
                        if failures > steps {
                            return Err(e);
                        }
                        agent.reset(space, agent_cfg, seed)?;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(kept)
        })
        .collect::<Result<_>>()?;
    Ok(per_slot.into_iter().flatten().take(count).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_composition() {
        let space = GeneratorHyperSpace::default();
        let pool = AgentPool::new(64, &space, &AgentConfig::default(), 0).unwrap();
        assert_eq!(pool.agents.len(), 8);
        assert!(pool.is_adversarial(7) && !pool.is_adversarial(8));
        let none = AgentConfig {
            fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(AgentPool::new(16, &space, &none, 0).unwrap().agents.len(), 0);
    }

    #[test]
    fn reset_schedule() {
        let space = GeneratorHyperSpace::default();
        let cfg = AgentConfig {
            reset_period: 3,
            ..Default::default()
        };
        let mut a = AgentState::new(&space, &cfg, 1, 0, 0).unwrap();
        let mut resets = Vec::new();
        for step in 1..=9 {
            if a.maybe_reset(&space, &cfg, 1).unwrap() {
                resets.push(step);
            }
            assert!(a.steps_since_reset < a.reset_period);
        }
        assert_eq!(resets, vec![3, 6, 9]);
        assert_eq!(a.generation, 3);
        let again = AgentState::new(&space, &cfg, 1, 0, 3).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn period_one_resets_every_step() {
        let space = GeneratorHyperSpace::default();
        let cfg = AgentConfig {
            reset_period: 1,
            ..Default::default()
        };
        let mut a = AgentState::new(&space, &cfg, 2, 0, 0).unwrap();
        for _ in 0..4 {
            let before = a.generator.params.checksum();
            assert!(a.maybe_reset(&space, &cfg, 2).unwrap());
            assert_ne!(before, a.generator.params.checksum());
        }
    }

    #[test]
    fn agent_specs_carry_temperature() {
        let cfg = AgentConfig::default();
        let a = AgentState::new(&GeneratorHyperSpace::default(), &cfg, 0, 0, 0).unwrap();
        assert!(a
            .generator
            .response_spec
            .iter()
            .chain(a.generator.feature_specs.iter().flatten())
            .all(|s| s.temperature == cfg.temperature));
    }
}
