//! Experiment configuration: one JSON document describing the world, the
//! dataset draw, the architecture, the training recipe, the sampler, and the
//! output location. Saved copies always have every default materialized so
//! an output directory is reproducible from its artifacts alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_linear_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::eval::EvalOptions;
use crate::prior::PriorConfig;
use crate::train::{Strategy, TrainConfig};
use crate::world::{build_world, make_dataset, DatasetSplit, World, WorldSpec};
use crate::{Error, Result};

/// Sizes and seed of the dataset draw; embeddings are regenerated exactly
/// from this plus the world spec, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_eval_seen: usize,
    pub n_eval_holdout: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn desk(seed: u64) -> Self {
        Self { n_train: 5000, n_eval_seen: 500, n_eval_holdout: 300, seed }
    }
}

fn default_timesteps() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

/// Linear noise-schedule parameters (consumed by the diffusion strategy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: default_timesteps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

fn default_ablate_steps() -> Vec<usize> {
    vec![1, 2, 5, 10, 25]
}
fn default_ablate_etas() -> Vec<f64> {
    vec![0.0, 0.3, 0.7, 1.0]
}
fn default_ablate_lambdas() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.4, 1.0, 5.0]
}
fn default_ablate_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Sweep lists for the `ablate` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateConfig {
    #[serde(default = "default_ablate_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_ablate_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "default_ablate_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_ablate_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            steps: default_ablate_steps(),
            etas: default_ablate_etas(),
            lambdas: default_ablate_lambdas(),
            seeds: default_ablate_seeds(),
        }
    }
}

fn default_output_dir() -> String {
    "runs/experiment".into()
}

/// The complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub dataset: DatasetConfig,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Minute-scale preset: desk world, compact prior, 3000-step training.
    pub fn desk(strategy: Strategy, seed: u64) -> Self {
        Self {
            world: WorldSpec::desk(7),
            dataset: DatasetConfig::desk(11),
            prior: PriorConfig::desk(strategy.time_conditioned()),
            train: TrainConfig::desk(strategy, seed),
            schedule: ScheduleConfig::default(),
            eval: EvalOptions::default(),
            ablate: AblateConfig::default(),
            output_dir: format!("runs/desk-{}-{seed}", strategy.name()),
        }
    }

    /// Full-scale recipe preset: lambda 0.2, tau 0.07, lr 5e-5, batch 256,
    /// 1000 timesteps, 25 inference steps, guidance 4.0, dropout 0.10.
    /// Architecture stays at desk scale unless overridden; the full-width
    /// architecture is constructible via `PriorConfig::paper_scale`.
    pub fn paper(strategy: Strategy, seed: u64) -> Self {
        let mut config = Self::desk(strategy, seed);
        config.train = TrainConfig::paper(strategy, seed);
        config.output_dir = format!("runs/paper-{}-{seed}", strategy.name());
        config
    }

    pub fn preset(name: &str, strategy: Strategy, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(strategy, seed)),
            "paper" => Ok(Self::paper(strategy, seed)),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected desk|paper)"))),
        }
    }

    /// Cross-field consistency checks.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.prior.validate()?;
        self.train.validate(&self.prior)?;
        if self.world.embed_dim != self.prior.embed_dim {
            return Err(Error::Config(format!(
                "world embed_dim {} does not match prior embed_dim {}",
                self.world.embed_dim, self.prior.embed_dim
            )));
        }
        if self.prior.time_conditioned && self.schedule.timesteps != self.prior.max_timesteps {
            return Err(Error::Config(format!(
                "schedule timesteps {} does not match prior max_timesteps {}",
                self.schedule.timesteps, self.prior.max_timesteps
            )));
        }
        if self.dataset.n_train == 0 {
            return Err(Error::Config("dataset n_train must be positive".into()));
        }
        if self.eval.sampler.inference_steps == 0 {
            return Err(Error::Config("eval inference_steps must be positive".into()));
        }
        Ok(())
    }

    /// Materialize the world, dataset, and (for diffusion) the schedule.
    pub fn build(&self) -> Result<(World, DatasetSplit, Option<NoiseSchedule>)> {
        self.validate()?;
        let world = build_world(&self.world)?;
        let split = make_dataset(
            &world,
            self.dataset.n_train,
            self.dataset.n_eval_seen,
            self.dataset.n_eval_holdout,
            self.dataset.seed,
        )?;
        let schedule = if self.train.strategy.time_conditioned() {
            Some(self.schedule.build()?)
        } else {
            None
        };
        Ok((world, split, schedule))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    /// Pretty JSON with every default materialized, trailing newline.
    pub fn to_json(&self) -> Result<String> {
        Ok(format!("{}\n", serde_json::to_string_pretty(self)?))
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// The dataset spec file written by `gen-data`: world + draw parameters,
/// never materialized embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub world: WorldSpec,
    pub dataset: DatasetConfig,
}

impl DatasetFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(format!("{}\n", serde_json::to_string_pretty(self)?))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
