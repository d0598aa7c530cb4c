use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::log::{LogRecord, LogWriter, TrainLog};
use super::{sample_split, RunConfig};
use crate::agents::{agent_forward, collect_grads, AgentPool, AgentState, ResetReason};
use crate::eval::score_episodes;
use crate::io::RunManifest;
use crate::model::{
    forward, nll, read_tensor_file, save_checkpoint, write_tensor_file, CheckpointHeader, Context,
    Episode, GateMode, ModelConfig, CHECKPOINT_VERSION,
};
use crate::prior::{generate_dataset, sample_generator, GeneratorHyperSpace};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{ascend_step, Adam, AdamState, ParamSet, Tape, Tensor, TensorError};
use crate::{Error, Result};

const TAG_EPISODE: u64 = 0xE915;
const TAG_EVAL: u64 = 0xE7A1;
const TAG_INIT: u64 = 0x1417;
/// Fresh generators tried before an ordinary episode slot gives up.
const GENERATOR_ATTEMPTS: u64 = 8;

pub const STATE_FILE: &str = "state.bin";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Draws the ordinary-generator episode at position `index` of step `step`:
/// a fresh generator, its dataset and a split. Returns the gate-noise seed
/// alongside.
pub fn ordinary_episode(
    space: &GeneratorHyperSpace,
    run_seed: u64,
    step: u64,
    index: u64,
) -> Result<(Episode, u64)> {
    episode_from(space, derive_seed(run_seed, &[TAG_EPISODE, step, index]))
}

fn episode_from(space: &GeneratorHyperSpace, base: u64) -> Result<(Episode, u64)> {
    let mut last = None;
    for attempt in 0..GENERATOR_ATTEMPTS {
        let s = derive_seed(base, &[attempt]);
        let g = match sample_generator(space, derive_seed(s, &[0])) {
            Ok(g) => g,
            Err(e @ Error::Generator(_)) => {
                last = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        match generate_dataset(&g, g.default_samples, derive_seed(s, &[1])) {
            Ok(ds) => {
                let split = sample_split(ds.n, &mut derive_rng(s, &[2]))?;
                return Ok((Episode::new(ds, split)?, derive_seed(s, &[3])));
            }
            Err(e @ Error::Generator(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Generator("no generator attempts".into())))
}

struct PassOut {
    nll: f64,
    model: Vec<Vec<f64>>,
    agent: Option<Vec<Vec<f64>>>,
}

fn ordinary_pass(cfg: &ModelConfig, params: &ParamSet, ep: &Episode, gate_seed: u64) -> Result<PassOut> {
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let ctx = Context::from_episode(&tape, ep)?;
    let out = forward(cfg, &vars, &ctx, GateMode::Sample { seed: gate_seed })?;
    let loss = nll(&out, &ep.targets())?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFiniteGradient { op: "nll" }.into());
    }
    let grads = tape.backward(loss)?;
    Ok(PassOut {
        nll: loss.item(),
        model: collect_grads(params, &vars, &grads),
        agent: None,
    })
}

fn agent_pass(cfg: &ModelConfig, params: &ParamSet, agent: &AgentState, seed: u64) -> Result<PassOut> {
    let tape = Tape::new();
    let mv = params.bind(&tape, true);
    let av = agent.params().bind(&tape, true);
    let ep = agent_forward(&tape, cfg, &mv, agent, &av, seed)?;
    if !ep.nll.item().is_finite() {
        return Err(TensorError::NonFiniteGradient { op: "nll" }.into());
    }
    let grads = tape.backward(ep.nll)?;
    Ok(PassOut {
        nll: ep.nll.item(),
        model: collect_grads(params, &mv, &grads),
        agent: Some(collect_grads(agent.params(), &av, &grads)),
    })
}

/// Mutable training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub params: ParamSet,
    pub adam: Adam,
    pub pool: AgentPool,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    adam_step: u64,
    model: ModelConfig,
    pool: AgentPool,
}

impl TrainerState {
    pub fn init(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let seed = run.train.seed;
        let params = run.model.init(derive_seed(seed, &[TAG_INIT]))?;
        let adam = Adam::new(&params, run.train.lr);
        let pool = AgentPool::new(run.train.batch_size, &run.effective_prior(), &run.train.agents, seed)?;
        Ok(Self {
            step: 0,
            params,
            adam,
            pool,
        })
    }

    pub fn save(&self, path: &Path, model: &ModelConfig) -> Result<()> {
        let meta = StateMeta {
            step: self.step,
            lr: self.adam.lr,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            adam_step: self.adam.state.step,
            model: model.clone(),
            pool: self.pool.clone(),
        };
        let mut owned: Vec<(String, Tensor)> = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            owned.push((format!("adam.m.{}", p.name), Tensor::new(shape.clone(), self.adam.state.m[i].clone())?));
            owned.push((format!("adam.v.{}", p.name), Tensor::new(shape, self.adam.state.v[i].clone())?));
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
        write_tensor_file(path, &meta, &tensors)
    }

    pub fn load(path: &Path, model: &ModelConfig) -> Result<Self> {
        let (meta, tensors): (StateMeta, _) = read_tensor_file(path)?;
        if &meta.model != model {
            return Err(Error::Checkpoint("saved state was produced by a different model config".into()));
        }
        let count = model.inventory().len();
        if tensors.len() != 3 * count {
            return Err(Error::Checkpoint(format!(
                "state holds {} tensors, expected {}",
                tensors.len(),
                3 * count
            )));
        }
        let mut params = ParamSet::new();
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        let mut iter = tensors.into_iter();
        for _ in 0..count {
            let (name, t) = iter.next().expect("counted");
            params.push(name, t);
        }
        for _ in 0..count {
            m.push(iter.next().expect("counted").1.into_data());
            v.push(iter.next().expect("counted").1.into_data());
        }
        model.check_params(&params)?;
        let mut pool = meta.pool;
        pool.restore();
        Ok(Self {
            step: meta.step,
            params,
            adam: Adam {
                lr: meta.lr,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                state: AdamState {
                    step: meta.adam_step,
                    m,
                    v,
                },
            },
            pool,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub nll: f64,
    pub episodes: usize,
    pub skipped: bool,
    /// Resets and non-finite events raised during the step.
    pub events: Vec<LogRecord>,
}

/// One optimizer step: `accumulation` micro-steps of `batch_size` episodes,
/// one backward pass each, Adam on the model, ascent on every agent after
/// its own episode, then the agents' reset clocks.
pub fn train_step(state: &mut TrainerState, run: &RunConfig) -> Result<StepOutcome> {
    let cfg = &run.model;
    let tc = &run.train;
    let space = run.effective_prior();
    let m = tc.batch_size;
    let step = state.step;
    let scale = 1.0 / tc.effective_batch() as f64;
    let mut events = Vec::new();
    let mut nll_sum = 0.0;
    let mut counted = 0;
    let mut skip = false;
    state.params.zero_grad();

    for micro in 0..tc.accumulation {
        let params = &state.params;
        let pool = &state.pool;
        let results: Vec<Result<PassOut>> = (0..m)
            .into_par_iter()
            .map(|slot| {
                let index = (micro * m + slot) as u64;
                if pool.is_adversarial(slot) {
                    let seed = derive_seed(tc.seed, &[TAG_EPISODE, step, index]);
                    agent_pass(cfg, params, &pool.agents[slot], seed)
                } else {
                    let (ep, gate) = ordinary_episode(&space, tc.seed, step, index)?;
                    ordinary_pass(cfg, params, &ep, gate)
                }
            })
            .collect();

        for (slot, res) in results.into_iter().enumerate() {
            match res {
                Ok(out) => {
                    state.params.accumulate_flat(&out.model, scale);
                    nll_sum += out.nll;
                    counted += 1;
                    if let Some(g) = out.agent {
                        let agent = &mut state.pool.agents[slot];
                        agent.generator.params.zero_grad();
                        agent.generator.params.accumulate_flat(&g, 1.0);
                        ascend_step(&mut agent.generator.params, agent.lr, agent.weight_decay)?;
                        agent.generator.params.zero_grad();
                        if !agent.generator.params.values_finite() {
                            events.push(LogRecord::NonFinite {
                                step,
                                slot,
                                detail: "agent weights after ascent".into(),
                            });
                            agent.reset(&space, &tc.agents, tc.seed)?;
                            events.push(LogRecord::Reset {
                                step,
                                slot,
                                reason: ResetReason::NonFinite,
                            });
                        }
                    }
                }
                Err(e @ (Error::Tensor(_) | Error::Generator(_))) if state.pool.is_adversarial(slot) => {
                    log::warn!("agent slot {slot} failed at step {step}: {e}; resetting");
                    events.push(LogRecord::NonFinite {
                        step,
                        slot,
                        detail: e.to_string(),
                    });
                    state.pool.agents[slot].reset(&space, &tc.agents, tc.seed)?;
                    events.push(LogRecord::Reset {
                        step,
                        slot,
                        reason: ResetReason::NonFinite,
                    });
                }
                Err(e @ Error::Tensor(_)) => {
                    log::warn!("non-finite model gradient at step {step}: {e}; skipping step");
                    events.push(LogRecord::NonFinite {
                        step,
                        slot,
                        detail: e.to_string(),
                    });
                    skip = true;
                }
                Err(e) => return Err(e),
            }
        }
    }

    if !state.params.grads_finite() {
        skip = true;
    }
    if skip {
        state.params.zero_grad();
    } else {
        state.adam.step(&mut state.params)?;
        state.params.zero_grad();
    }

    for agent in &mut state.pool.agents {
        if agent.maybe_reset(&space, &tc.agents, tc.seed)? {
            events.push(LogRecord::Reset {
                step: step + 1,
                slot: agent.slot,
                reason: ResetReason::Period,
            });
        }
    }
    state.step += 1;
    Ok(StepOutcome {
        nll: if counted > 0 { nll_sum / counted as f64 } else { f64::NAN },
        episodes: counted,
        skipped: skip,
        events,
    })
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Directory for checkpoints, training state, log and manifest.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/state.bin`.
    pub resume: bool,
    /// Stop once this many optimizer steps have completed (simulated
    /// interruption); the state is saved first.
    pub stop_after: Option<u64>,
    /// Episodes scored at each evaluation instead of held-out prior draws.
    pub eval_set: Option<Vec<Episode>>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub params: ParamSet,
    pub log: TrainLog,
    pub state: TrainerState,
    pub completed: bool,
}

fn default_eval_set(run: &RunConfig) -> Result<Vec<Episode>> {
    let space = run.effective_prior();
    (0..run.train.eval_episodes as u64)
        .map(|i| Ok(episode_from(&space, derive_seed(run.train.seed, &[TAG_EVAL, i]))?.0))
        .collect()
}

struct Sink {
    log: TrainLog,
    writer: Option<LogWriter>,
}

impl Sink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.write(&r)?;
        }
        self.log.records.push(r);
        Ok(())
    }
}

fn save_all(dir: &Path, run: &RunConfig, state: &TrainerState) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: run.model.clone(),
        seed: run.train.seed,
        step: state.step,
    };
    save_checkpoint(&dir.join(MODEL_FILE), &header, &state.params)?;
    state.save(&dir.join(STATE_FILE), &run.model)
}

/// Runs optimizer steps until the dataset budget is spent. The returned
/// parameters are those of the final step.
pub fn pretrain(run: &RunConfig, opts: &PretrainOptions) -> Result<PretrainOutput> {
    run.validate()?;
    let total = run.train.total_steps();
    let mut state = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) => TrainerState::load(&dir.join(STATE_FILE), &run.model)?,
        (None, true) => return Err(Error::Config("resume requires an output directory".into())),
        _ => TrainerState::init(run)?,
    };
    let mut manifest = None;
    let writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mf = RunManifest::started(run, &dir.join(MODEL_FILE));
            mf.write(&dir.join(MANIFEST_FILE))?;
            manifest = Some(mf);
            Some(LogWriter::create(&dir.join(LOG_FILE), opts.resume)?)
        }
        None => None,
    };
    let mut sink = Sink {
        log: TrainLog::default(),
        writer,
    };
    let eval_set = match &opts.eval_set {
        Some(e) => e.clone(),
        None => default_eval_set(run)?,
    };
    let every = run.train.eval_every;
    let evaluate = |state: &TrainerState, sink: &mut Sink| -> Result<()> {
        if eval_set.is_empty() {
            return Ok(());
        }
        let (auc, nll) = score_episodes(&run.model, &state.params, &eval_set)?;
        sink.push(LogRecord::Eval {
            step: state.step,
            auc,
            nll,
        })
    };
    if state.step == 0 && every > 0 {
        evaluate(&state, &mut sink)?;
    }

    let mut completed = true;
    while state.step < total {
        if opts.stop_after.is_some_and(|s| state.step >= s) {
            completed = false;
            break;
        }
        let out = train_step(&mut state, run)?;
        sink.push(LogRecord::Step {
            step: state.step,
            nll: out.nll,
            episodes: out.episodes,
            skipped: out.skipped,
        })?;
        for e in out.events {
            sink.push(e)?;
        }
        let at_cadence = every > 0 && state.step % every == 0;
        if at_cadence {
            evaluate(&state, &mut sink)?;
        }
        if at_cadence || state.step == total {
            if let Some(dir) = &opts.out_dir {
                save_all(dir, run, &state)?;
                sink.push(LogRecord::Checkpoint { step: state.step })?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        if !completed || total == 0 {
            save_all(dir, run, &state)?;
        }
        if completed {
            if let Some(mut mf) = manifest {
                mf.finish();
                mf.write(&dir.join(MANIFEST_FILE))?;
            }
        }
    }
    Ok(PretrainOutput {
        params: state.params.clone(),
        log: sink.log,
        state,
        completed,
    })
}
