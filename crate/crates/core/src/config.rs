//! Experiment configuration, read from TOML with one section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{DdpgConfig, DqnConfig};
use crate::cea::CeaConfig;
use crate::envs::{EnvKind, EnvSettings, GridWorldConfig, HighwayConfig, PendulumConfig};
use crate::error::{Error, Result};
use crate::kde::SamplerConfig;
use crate::replay::PerConfig;
use crate::space::ActionSpace;
use crate::sta::StaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Dqn,
    Ddpg,
}

impl std::str::FromStr for AgentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dqn" => Ok(AgentKind::Dqn),
            "ddpg" => Ok(AgentKind::Ddpg),
            other => Err(Error::Config(format!("unknown agent '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub env: EnvKind,
    pub agent: AgentKind,
    pub cea: bool,
    pub per: bool,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub out_dir: PathBuf,
    /// Buffer size before learning starts.
    pub learning_starts: usize,
    /// Environment steps taken with uniformly random actions at the start.
    pub random_steps: usize,
    /// Gradient updates per environment step once learning has started.
    pub updates_per_step: usize,
    /// Pretrained transition model to load instead of pretraining one.
    pub sta_checkpoint: Option<PathBuf>,
    /// Collect the pretraining corpus from uniformly random start cells (gridworld).
    pub sta_corpus_random_start: bool,
    /// Write the final buffer of every seed to `priorities_dump.jsonl`.
    pub dump_priorities: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            env: EnvKind::Gridworld,
            agent: AgentKind::Dqn,
            cea: true,
            per: true,
            seeds: vec![42, 43, 44, 45],
            episodes: 300,
            out_dir: PathBuf::from("runs"),
            learning_starts: 500,
            random_steps: 0,
            updates_per_step: 1,
            sta_checkpoint: None,
            sta_corpus_random_start: true,
            dump_priorities: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub gridworld: GridWorldConfig,
    pub pendulum: PendulumConfig,
    pub highway: HighwayConfig,
    pub dqn: DqnConfig,
    pub ddpg: DdpgConfig,
    pub replay: PerConfig,
    pub sta: StaConfig,
    /// Continuous candidate sampler; bounds default to the action box.
    pub sampler: Option<SamplerConfig>,
    pub cea: CeaConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn env_settings(&self) -> EnvSettings {
        EnvSettings { gridworld: self.gridworld.clone(), pendulum: self.pendulum.clone(), highway: self.highway.clone() }
    }

    /// Replay settings after applying the PER toggle.
    pub fn replay_config(&self) -> PerConfig {
        if self.experiment.per {
            self.replay.clone()
        } else {
            PerConfig { prior_eps: self.replay.prior_eps, ..PerConfig::uniform(self.replay.capacity) }
        }
    }

    pub fn sampler_config(&self, space: &ActionSpace) -> SamplerConfig {
        match (&self.sampler, space) {
            (Some(s), _) => s.clone(),
            (None, ActionSpace::Continuous { low, high }) => {
                SamplerConfig::for_bounds(low.iter().zip(high).map(|(l, h)| [*l, *h]).collect())
            }
            (None, ActionSpace::Discrete(_)) => SamplerConfig::default(),
        }
    }

    pub fn batch_size(&self) -> usize {
        match self.experiment.agent {
            AgentKind::Dqn => self.dqn.batch_size,
            AgentKind::Ddpg => self.ddpg.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if e.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if e.updates_per_step == 0 {
            return Err(Error::Config("updates_per_step must be at least 1".into()));
        }
        let continuous = matches!(e.env, EnvKind::Pendulum);
        match (e.agent, continuous) {
            (AgentKind::Ddpg, false) => {
                return Err(Error::Config(format!("DDPG needs a continuous action space, {:?} is discrete", e.env)))
            }
            (AgentKind::Dqn, true) => {
                return Err(Error::Config(format!("DQN needs a discrete action space, {:?} is continuous", e.env)))
            }
            _ => {}
        }
        self.dqn.validate()?;
        self.ddpg.validate()?;
        self.cea.validate()?;
        if let Some(s) = &self.sampler {
            s.validate()?;
        }
        if self.replay.capacity < self.batch_size() {
            return Err(Error::Config("replay capacity is smaller than the batch size".into()));
        }
        if self.sta.batch_size == 0 || self.sta.corpus_size == 0 {
            return Err(Error::Config("transition-model batch and corpus sizes must be positive".into()));
        }
        Ok(())
    }
}
