//! Run configuration: one JSON document for every command, with unknown
//! keys rejected and the resolved form written next to each run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::encoders::EncoderSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::StageConfig;
use crate::tta::{make_variants, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    pub enabled: bool,
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            enabled: false,
            scales: vec![1.2, 1.3, 1.4],
            flip: true,
        }
    }
}

impl TtaConfig {
    /// Variants used at inference: the identity alone when TTA is off.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.enabled {
            make_variants(&self.scales, self.flip)
        } else {
            Ok(vec![Variant::IDENTITY])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    /// `null` skips the second stage.
    pub stage2: Option<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig::stage1(0),
            stage2: Some(StageConfig::stage2(0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDataConfig {
    pub clip: SynthConfig,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Clip `i` of the training set uses seed `train_seed + i`.
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        SynthDataConfig {
            clip: SynthConfig::default(),
            train_clips: 40,
            eval_clips: 10,
            train_seed: 1000,
            eval_seed: 5000,
        }
    }
}

/// Dataset locations: a `dataset.json`, a directory holding one, or a
/// single sequence manifest. `null` means "generate synthetically in memory".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub tta: TtaConfig,
    pub train: TrainConfig,
    pub synth: SynthDataConfig,
    pub data: DataConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            tta: TtaConfig::default(),
            train: TrainConfig::default(),
            synth: SynthDataConfig::default(),
            data: DataConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const RUN_INFO_FILE: &str = "run_info.json";

impl RunConfig {
    /// Small, fast settings for the synthetic benchmark: narrow encoders,
    /// a single long stage-1 run at a high learning rate, longer skips and
    /// scale/flip augmentation matching the TTA sizes.
    pub fn benchmark() -> Self {
        let ch = [8, 16, 32];
        let mut model = ModelConfig {
            visual: EncoderSpec::toy_visual(ch),
            geometric: EncoderSpec::toy_geometric(ch),
            ..ModelConfig::default()
        };
        model.memory.key_dim = 16;
        model.memory.value_dim = 32;
        let mut stage1 = StageConfig::stage1(0);
        stage1.iterations = 2000;
        stage1.lr = 2e-3;
        stage1.max_skip = 4;
        stage1.augment_scales = vec![1.0, 1.2, 1.3, 1.4];
        stage1.augment_flip = true;
        RunConfig {
            model,
            tta: TtaConfig {
                enabled: true,
                ..TtaConfig::default()
            },
            train: TrainConfig { stage1, stage2: None },
            out: PathBuf::from("runs/benchmark"),
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Propagate the run seed into the stages and check every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.stage1.seed = self.seed;
        if let Some(s2) = &mut self.train.stage2 {
            s2.seed = self.seed.wrapping_add(1);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |key: &str, e: Error| Error::config(format!("`{key}`: {e}"));
        self.model.validate().map_err(|e| ctx("model", e))?;
        self.train.stage1.validate().map_err(|e| ctx("train.stage1", e))?;
        if self.train.stage1.stage != 1 {
            return Err(Error::config("`train.stage1.stage` must be 1"));
        }
        if let Some(s2) = &self.train.stage2 {
            s2.validate().map_err(|e| ctx("train.stage2", e))?;
            if s2.stage != 2 {
                return Err(Error::config("`train.stage2.stage` must be 2"));
            }
        }
        make_variants(&self.tta.scales, self.tta.flip).map_err(|e| ctx("tta", e))?;
        self.synth.clip.validate().map_err(|e| ctx("synth.clip", e))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Write `config.resolved.json` and `run_info.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&p, self.to_json() + "\n").map_err(|e| Error::io(&p, e))?;
        let info = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
        });
        let p = dir.join(RUN_INFO_FILE);
        fs::write(&p, serde_json::to_string_pretty(&info).expect("json") + "\n").map_err(|e| Error::io(&p, e))
    }
}
