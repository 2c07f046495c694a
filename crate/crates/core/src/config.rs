//! TOML configuration covering vehicle, environment, training and
//! evaluation. Files may be partial: missing keys keep their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvConfig, Method, RewardWeights, Transition, Vehicle};
use crate::eval::{ErrorOrigin, ExperimentConfig, MinSnapParams, DEFAULT_CONE_DEG};
use crate::ppo::{PpoConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub nti: RewardWeights,
    pub itn: RewardWeights,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection {
            nti: RewardWeights::nti(),
            itn: RewardWeights::itn(),
        }
    }
}

impl RewardSection {
    pub fn get(&self, t: Transition) -> RewardWeights {
        match t {
            Transition::Nti => self.nti,
            Transition::Itn => self.itn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Actuator randomization during training; evaluation uses `env`.
    pub randomize_actuators: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            hidden: vec![512, 512],
            seed: 0,
            checkpoint_every: 50,
            randomize_actuators: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub seed: u64,
    pub cone_deg: f64,
    pub origin: ErrorOrigin,
    pub minsnap: MinSnapParams,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n: 20,
            seed: 0,
            cone_deg: DEFAULT_CONE_DEG,
            origin: ErrorOrigin::World,
            minsnap: MinSnapParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub vehicle: Vehicle,
    pub env: EnvConfig,
    pub reward: RewardSection,
    pub ppo: PpoConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Config {
    /// Parses `text` on top of the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let overrides: toml::Table = toml::from_str(text)?;
        let mut base: toml::Table = toml::from_str(&Config::default().to_toml_string()?)?;
        merge(&mut base, overrides);
        let cfg: Config = base.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.vehicle.validate().map_err(|e| inv(&e))?;
        self.env.validate().map_err(|e| inv(&e))?;
        self.reward.nti.validate().map_err(|e| inv(&e))?;
        self.reward.itn.validate().map_err(|e| inv(&e))?;
        self.ppo.validate().map_err(|e| inv(&e))?;
        self.experiment(Method::StepHfcaOca, Transition::Nti)
            .validate()
            .map_err(|e| inv(&e))?;
        if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
            return Err(ConfigError::Invalid("train.hidden must list positive widths".into()));
        }
        Ok(())
    }

    pub fn experiment(&self, method: Method, transition: Transition) -> ExperimentConfig {
        ExperimentConfig {
            method,
            transition,
            n: self.eval.n,
            seed: self.eval.seed,
            cone_deg: self.eval.cone_deg,
            origin: self.eval.origin,
            env: self.env,
            vehicle: self.vehicle,
            minsnap: self.eval.minsnap,
        }
    }

    pub fn training(&self, transition: Transition) -> TrainConfig {
        TrainConfig {
            transition,
            ppo: self.ppo,
            env: EnvConfig {
                randomize_actuators: self.train.randomize_actuators,
                ..self.env
            },
            vehicle: self.vehicle,
            weights: self.reward.get(transition),
            hidden: self.train.hidden.clone(),
            seed: self.train.seed,
            checkpoint_every: self.train.checkpoint_every,
        }
    }
}
