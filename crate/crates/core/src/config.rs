//! The experiment document: every knob of a run in one JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gae::GaeConfig;
use crate::schedules::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Refine,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pretrain, Stage::Refine, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Refine => "refine",
            Stage::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Optimisation settings of one stage. `batch` counts images for pretrain,
/// groups for refine, and images (a whole number of groups) for joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    #[serde(default)]
    pub lambda_ss: f64,
    #[serde(default)]
    pub lambda_ur: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_log_every() -> usize {
    50
}

fn default_checkpoint_every() -> usize {
    1000
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-4,
            batch: 16,
            steps: 20_000,
            lambda_ss: 0.0,
            lambda_ur: 0.0,
            gamma: 0.0,
            log_every: default_log_every(),
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn refine() -> Self {
        Self { lr: 4e-5, batch: 64, steps: 5_000, lambda_ss: 1.0, lambda_ur: 0.5, ..Self::pretrain() }
    }

    pub fn joint() -> Self {
        Self { lr: 1e-5, batch: 16, steps: 5_000, lambda_ss: 0.5, lambda_ur: 0.5, gamma: 1.0, ..Self::pretrain() }
    }

    fn validate(&self, key: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{key}.{what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lambda_ss >= 0.0 && self.lambda_ur >= 0.0) {
            return bad("lambda_ss/lambda_ur must be non-negative");
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return bad("gamma must be non-negative");
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return bad("log_every/checkpoint_every must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// DDIM ladder length for sampling and inversion.
    pub sample_steps: usize,
    /// Images used for the round-trip reconstruction metrics.
    pub recon_images: usize,
    pub recombinations: usize,
    pub ppl_pairs: usize,
    pub ppl_epsilon: f64,
    pub classifier_steps: usize,
    pub classifier_lr: f64,
    pub split_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample_steps: 100,
            recon_images: 48,
            recombinations: 100,
            ppl_pairs: 16,
            ppl_epsilon: 1e-2,
            classifier_steps: 500,
            classifier_lr: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub resolution: usize,
    /// Directory holding checkpoints, logs, and the latent store.
    pub run_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub gae: GaeConfig,
    pub pretrain: StageConfig,
    pub refine: StageConfig,
    pub joint: StageConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 32,
            run_dir: PathBuf::from("run"),
            schedule: ScheduleConfig::default(),
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            gae: GaeConfig::default(),
            pretrain: StageConfig::pretrain(),
            refine: StageConfig::refine(),
            joint: StageConfig::joint(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; schema errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Refine => &self.refine,
            Stage::Joint => &self.joint,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Pretrain => &mut self.pretrain,
            Stage::Refine => &mut self.refine,
            Stage::Joint => &mut self.joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder.resolution != self.resolution || self.denoiser.resolution != self.resolution {
            return bad("encoder.resolution and denoiser.resolution must equal resolution".into());
        }
        if self.encoder.d_sem != self.denoiser.d_sem || self.encoder.d_sem != self.gae.d_sem {
            return bad("encoder.d_sem, denoiser.d_sem and gae.d_sem must agree".into());
        }
        if self.gae.layout.len() != crate::dataset::CARDINALITIES.len() {
            return bad(format!(
                "gae.layout must list the {} dataset attributes",
                crate::dataset::CARDINALITIES.len()
            ));
        }
        for (a, name) in self.gae.layout.attributes().iter().zip(crate::dataset::ATTRIBUTE_NAMES) {
            if a.name != name {
                return bad(format!("gae.layout: expected attribute `{name}`, found `{}`", a.name));
            }
        }
        for st in Stage::ALL {
            self.stage(st).validate(st.name()).map_err(|e| Error::Config(e.to_string()))?;
        }
        let m = self.gae.layout.len();
        if self.refine.batch < m {
            return bad(format!("refine.batch must be at least {m} for distinct donors"));
        }
        if !self.joint.batch.is_multiple_of(m + 1) {
            return bad(format!("joint.batch must be a multiple of the group size {}", m + 1));
        }
        if self.eval.sample_steps == 0 || self.eval.sample_steps > self.schedule.steps {
            return bad("eval.sample_steps must be in 1..=schedule.steps".into());
        }
        self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        Ok(())
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(format!("{}.ckpt", stage.name()))
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(format!("{}.csv", stage.name()))
    }

    pub fn latent_store_path(&self) -> PathBuf {
        self.run_dir.join("latents.bin")
    }
}
