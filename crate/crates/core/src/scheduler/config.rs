use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{ExternalMemoryModel, FeatureMapBuffer, PingPongConfig};
use crate::mme::MmeConfig;

/// How depthwise channel groups are spread over the MMEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DwcPolicy {
    /// Round `r` runs groups `r*m .. r*m + m`, one per MME.
    #[default]
    ChannelSplit,
    /// Groups run one after another; each group's rows are split into bands
    /// across the MMEs and its weights are broadcast.
    TimeMultiplex,
}

/// How pointwise work is spread over the MMEs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PwcPolicy {
    /// Each MME owns output groups and streams every input tile.
    #[default]
    OutputSplit,
    /// All MMEs share one output group, each taking different input tiles;
    /// a reduction pass merges the partial sums.
    InputSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub depthwise: DwcPolicy,
    pub pointwise: PwcPolicy,
    /// Count residual adds and pooling work toward achieved GOPS.
    pub count_elementwise_ops: bool,
}

/// Whole-accelerator configuration; the defaults are the four-MME design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceleratorConfig {
    pub num_mmes: usize,
    pub clock_hz: u64,
    pub mme: MmeConfig,
    pub weight_buffer: PingPongConfig,
    pub feature_map: FeatureMapBuffer,
    pub external_memory: ExternalMemoryModel,
    pub policy: PolicyConfig,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        AcceleratorConfig {
            num_mmes: 4,
            clock_hz: 133_000_000,
            mme: MmeConfig::default(),
            weight_buffer: PingPongConfig::default(),
            feature_map: FeatureMapBuffer::default(),
            external_memory: ExternalMemoryModel::default(),
            policy: PolicyConfig::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl AcceleratorConfig {
    pub fn reference() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_mmes == 0 {
            return Err(Error::invalid("num_mmes must be >= 1"));
        }
        if self.clock_hz == 0 {
            return Err(Error::invalid("clock_hz must be > 0"));
        }
        if self.weight_buffer.bank_bits == 0 {
            return Err(Error::invalid("weight_buffer.bank_bits must be > 0"));
        }
        self.mme.validate()?;
        self.external_memory.validate()
    }

    /// Parses and validates; any failure is a parse error carrying a line number.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: AcceleratorConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// `num_mmes * multipliers * 2 * clock`, in operations per second.
    pub fn peak_ops_per_second(&self) -> u128 {
        self.num_mmes as u128 * self.mme.multipliers() as u128 * 2 * self.clock_hz as u128
    }

    pub fn peak_gops(&self) -> f64 {
        self.peak_ops_per_second() as f64 / 1e9
    }
}
