//! Run configuration, parsed strictly from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::denoiser::DenoiserArch;
use crate::error::{Error, Result};
use crate::projector::ProjectorSpec;
use crate::schedule::ScheduleSpec;
use crate::trainer::{PersonalizeConfig, PretrainConfig};
use crate::world::WorldSpec;

/// Everything a run depends on. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldSpec,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserArch,
    pub projector: ProjectorSpec,
    pub pretrain: PretrainConfig,
    pub personalize: PersonalizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            world: WorldSpec::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserArch::default(),
            projector: ProjectorSpec::default(),
            pretrain: PretrainConfig::default(),
            personalize: PersonalizeConfig::default(),
        }
    }
}

/// The subset that determines a pretrained checkpoint.
#[derive(Serialize)]
struct PretrainKey<'a> {
    world: &'a WorldSpec,
    schedule: &'a ScheduleSpec,
    denoiser: &'a DenoiserArch,
    pretrain: &'a PretrainConfig,
}

fn short_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())[..12].to_string()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        crate::world::build_world(&self.world)?;
        self.pretrain.validate()?;
        self.personalize.validate()
    }

    /// Short digest of the canonical TOML form.
    pub fn hash(&self) -> String {
        short_hash(&self.to_toml())
    }

    /// `<output_dir>/<hash>-<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("{}-{}", self.hash(), self.seed))
    }

    /// Shared by every run whose world, schedule, architecture and pretraining agree.
    pub fn pretrain_dir(&self) -> PathBuf {
        let key = PretrainKey { world: &self.world, schedule: &self.schedule, denoiser: &self.denoiser, pretrain: &self.pretrain };
        let text = toml::to_string(&key).expect("pretrain key always serializes");
        self.output_dir.join(format!("pretrain-{}-{}", short_hash(&text), self.seed))
    }
}
