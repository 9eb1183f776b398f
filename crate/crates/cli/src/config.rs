//! Run configuration: a TOML file with one section per stage, overridden by
//! command-line flags. The merged result is written next to every run's
//! outputs.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use lcmt_core::data::SynthConfig;
use lcmt_core::decode::DecodeOptions;
use lcmt_core::extract::ExtractOptions;
use lcmt_core::model::{AdamConfig, FitOptions, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Base,
    #[default]
    Lcnmt,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Base => "base",
            TrainMode::Lcnmt => "lcnmt",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "base" => Ok(TrainMode::Base),
            "lcnmt" => Ok(TrainMode::Lcnmt),
            _ => Err(format!("unknown training mode {s:?} (expected base or lcnmt)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of withholding each constraint from a training batch.
    pub constraint_dropout: f64,
    /// Decay the learning rate linearly to zero at the last step.
    pub lr_decay: bool,
    /// Steps averaged for the reported final loss.
    pub loss_window: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Lcnmt,
            seed: 0,
            steps: 2000,
            batch_size: 16,
            constraint_dropout: 0.3,
            lr_decay: true,
            loss_window: 100,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn fit_options(&self) -> FitOptions {
        let mut adam = self.adam.clone();
        if self.lr_decay {
            adam.decay_until = Some(self.steps);
        }
        FitOptions {
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            constraint_dropout: self.constraint_dropout,
            adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Memory block positions, one trained model each.
    pub blocks: Vec<usize>,
    /// Constraint ratio used when decoding the test set.
    pub ratio: f64,
    /// Train plain models instead, as a control for seed noise.
    pub no_memory: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            blocks: (1..=6).collect(),
            ratio: 1.0,
            no_memory: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub extract: ExtractOptions,
    /// Vocabulary sizes are taken from the data and ignored here.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text).map_err(|detail| CliError::ConfigFile {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }
}

/// Memory block positions given on the command line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockList(pub Vec<usize>);

impl FromStr for BlockList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_blocks(s).map(BlockList)
    }
}

/// Parses `1..6` (inclusive) or a comma-separated list such as `1,2,4`.
pub fn parse_blocks(s: &str) -> Result<Vec<usize>, String> {
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("invalid block number {t:?}"))
    };
    let blocks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty block range {s:?}"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if blocks.is_empty() {
        return Err("no blocks given".into());
    }
    Ok(blocks)
}
