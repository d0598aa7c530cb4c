//! Prior fitting: episodes from the generator pool, one backward pass per
//! episode, Adam descent on the model and ascent on adversarial agents.

mod log;
mod run;

pub use self::log::{LogRecord, LogWriter, TrainLog};
pub use run::{
    ordinary_episode, pretrain, train_step, PretrainOptions, PretrainOutput, StepOutcome,
    TrainerState, STATE_FILE,
};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentConfig;
use crate::model::ModelConfig;
use crate::prior::GeneratorHyperSpace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMix {
    Classification,
    Regression,
    /// Task kind drawn per generator from the prior's classification share.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    /// Datasets per micro-step; also the number of generator slots.
    pub batch_size: usize,
    pub accumulation: usize,
    /// Total number of training datasets.
    pub budget: u64,
    pub tasks: TaskMix,
    /// Optimizer steps between evaluations and checkpoints; 0 disables both
    /// until the final step.
    pub eval_every: u64,
    /// Held-out prior episodes scored at each evaluation.
    pub eval_episodes: usize,
    pub agents: AgentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            batch_size: 64,
            accumulation: 1,
            budget: 6_400_000,
            tasks: TaskMix::Classification,
            eval_every: 100,
            eval_episodes: 16,
            agents: AgentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> u64 {
        (self.batch_size * self.accumulation) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.budget / self.effective_batch().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation must be at least 1".into()));
        }
        if self.budget < self.effective_batch() {
            return Err(Error::Config(format!(
                "budget {} is smaller than the effective batch {}",
                self.budget,
                self.effective_batch()
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        self.agents.validate()
    }
}

/// Everything a pre-training run needs; the on-disk run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub prior: GeneratorHyperSpace,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.effective_prior().validate()
    }

    /// The generator space with the task share implied by `train.tasks`.
    pub fn effective_prior(&self) -> GeneratorHyperSpace {
        let mut space = self.prior.clone();
        match self.train.tasks {
            TaskMix::Classification => space.classification_prob = 1.0,
            TaskMix::Regression => space.classification_prob = 0.0,
            TaskMix::Mixed => {}
        }
        space
    }
}

/// Training-set size `l` uniform on `[max(2, ceil(n / 10)), n - 2]`.
pub fn sample_split(n: usize, rng: &mut impl Rng) -> Result<usize> {
    if n < 4 {
        return Err(Error::Data(format!("episodes need at least 4 rows, got {n}")));
    }
    let lo = 2usize.max(n.div_ceil(10));
    Ok(rng.gen_range(lo..=n - 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn split_of_four_is_two() {
        let mut rng = rng_from(0);
        for _ in 0..100 {
            assert_eq!(sample_split(4, &mut rng).unwrap(), 2);
        }
        assert!(sample_split(3, &mut rng).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml_str("[train]\nbatch_size = 4\nbudget = 8\n").unwrap();
        assert_eq!(partial.train.batch_size, 4);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(RunConfig::from_toml_str("[train]\nbatch_size = 4\nbudget = 2\n").is_err());
    }
}
