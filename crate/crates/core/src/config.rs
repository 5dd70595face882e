//! Run configuration: one TOML document with a master seed and a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohortgen::{CodeUniverse, GenConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::{ExperimentGrid, FinetuneConfig};
use crate::mlm::PretrainConfig;
use crate::numkit::{key_of, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Holds `cohort.jsonl` and `vocab.tsv`.
    pub data_dir: PathBuf,
    /// Holds `model.ckpt` and the pretraining log.
    pub pretrain_dir: PathBuf,
    pub results_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "out/data".into(),
            pretrain_dir: "out/pretrain".into(),
            results_dir: "out/results".into(),
        }
    }
}

pub const DATASET_FILE: &str = "cohort.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub gen: GenConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub grid: ExperimentGrid,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Config {
            seed: 17,
            gen: GenConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            grid: ExperimentGrid::default(),
            paths: Paths::default(),
        };
        c.gen.seed = c.seed;
        c
    }
}

impl Config {
    /// Parses and validates; errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(key, e.into_inner().message().to_string())
        })?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.grid.validate(None)?;
        let vocab = CodeUniverse::from_config(&self.gen)?.vocab.len();
        if self.encoder.vocab_size != vocab {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("the generated code universe has {vocab} tokens"),
            ));
        }
        // history plus index visit (or query slot) never spans more than this many visits
        let visits = (self.gen.visits_max + 1).min(self.encoder.max_seq_len);
        if self.encoder.max_visits < visits {
            return Err(Error::config(
                "encoder.max_visits",
                format!("must be at least {visits} for the configured visits"),
            ));
        }
        Ok(())
    }

    /// Fully resolved document, suitable for writing beside outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn digest(&self) -> String {
        crate::checkpoint::sha256_hex(self.to_toml().as_bytes())
    }

    /// Independent random stream for a named stage.
    pub fn stream(&self, stage: &str) -> Rng {
        Rng::new(self.seed).derive(key_of(stage))
    }

    /// Base seed for the sweep's few-shot draws and cell seeds.
    pub fn sweep_seed(&self) -> u64 {
        self.stream("sweep").next_u64()
    }
}
