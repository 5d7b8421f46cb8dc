//! Run configuration: strict JSON with every default written out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::network::{BlockSpec, Mode, NetworkSpec};
use crate::neuron::{NeuronConfig, SurrogateSpec};
use crate::train::TrainerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Deep8,
}

/// Topology: either a named preset or an explicit block list. Input shape
/// and class count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<BlockSpec>>,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
}

fn default_timesteps() -> usize {
    4
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            preset: Some(Preset::Deep8),
            blocks: None,
            timesteps: default_timesteps(),
        }
    }
}

impl NetworkConfig {
    pub fn to_spec(
        &self,
        in_channels: usize,
        input_size: [usize; 2],
        classes: usize,
        mode: Mode,
    ) -> Result<NetworkSpec> {
        let mut spec = match (&self.preset, &self.blocks) {
            (Some(Preset::Deep8), None) => NetworkSpec::deep8(in_channels, input_size, classes, mode),
            (None, Some(blocks)) => NetworkSpec {
                in_channels,
                input_size,
                classes,
                timesteps: self.timesteps,
                mode,
                blocks: blocks.clone(),
            },
            (Some(_), Some(_)) => {
                return Err(Error::Config("network: give either preset or blocks, not both".into()));
            }
            (None, None) => return Err(Error::Config("network: preset or blocks is required".into())),
        };
        spec.timesteps = self.timesteps;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticTaskSpec),
    Idx(IdxFiles),
    /// Dataset containers written by `save_dataset`.
    Cached(CachedFiles),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticTaskSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CachedFiles {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub neuron: NeuronConfig,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            neuron: NeuronConfig::default(),
            surrogate: SurrogateSpec::default(),
            trainer: TrainerConfig::default(),
            dataset: DatasetConfig::default(),
            mode: Mode::default(),
            seed: 0,
            out: default_out(),
        }
    }
}

impl RunConfig {
    /// Parses and validates. Syntax and schema errors carry `path:line:column`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Checks everything that does not need the data on disk.
    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        self.surrogate.validate()?;
        self.trainer.validate()?;
        if self.network.timesteps == 0 {
            return Err(Error::Config("network.timesteps must be at least 1".into()));
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
            self.network.to_spec(s.channels, s.size, s.classes, self.mode)?;
        } else {
            // Input shape is only known once the files are read; check the
            // block chain against a stand-in of matching channel count.
            let channels = self
                .network
                .blocks
                .as_ref()
                .and_then(|b| b.first())
                .map_or(1, |b| b.channels_in);
            self.network.to_spec(channels, [64, 64], 2, self.mode)?;
        }
        Ok(())
    }

    /// Trainer settings with the run's mode and seed filled in.
    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            mode: self.mode,
            ..self.trainer.clone()
        }
    }

    /// The effective configuration as written into a run directory.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Hex SHA-256 of the effective configuration without seed and output
    /// directory, which name the run directory separately.
    pub fn hash(&self) -> String {
        let keyed = RunConfig {
            seed: 0,
            out: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(keyed.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `{out}/{hash[..16]}-s{seed}`.
    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("{}-s{}", &self.hash()[..16], self.seed))
    }
}
