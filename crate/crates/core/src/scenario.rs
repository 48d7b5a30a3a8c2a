//! TOML scenario files.
//!
//! ```toml
//! [sender]
//! n_fpga = 8
//!
//! [channel]
//! loss_up = 0.01
//! loss_down = 0.01
//!
//! [source]
//! total_packets = 1000
//!
//! [run]
//! trace = true
//! ```
//!
//! Every key is optional except the source size; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{ChannelConfig, CommandSpec, CommandStream, ConsumerModel, DataPattern, Scenario, SourceModel};
use crate::profile::WORDS_PER_PACKET;
use crate::receiver::ReceiverConfig;
use crate::sender::{DelayTuning, EarlyRetransmit, SenderConfig};

#[derive(Debug, Error)]
pub enum ScenarioFileError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenderSection {
    /// Number of senders, each on its own link.
    pub count: usize,
    pub n_fpga: u32,
    pub early_retransmit: EarlyRetransmit,
    pub retransmit_holdoff: u64,
    pub delay: DelayTuning,
}

impl Default for SenderSection {
    fn default() -> Self {
        let d = SenderConfig::default();
        SenderSection {
            count: 1,
            n_fpga: d.n_fpga,
            early_retransmit: d.early_retransmit,
            retransmit_holdoff: d.retransmit_holdoff,
            delay: d.delay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverSection {
    pub n_cpu: u32,
    pub max_slaves: usize,
    pub wakeup_threshold: u64,
    pub control_retries: u32,
    pub control_timeout: u64,
    /// Fraction of line rate the consumer drains; unlimited when absent.
    pub consumer_rate: Option<f64>,
    pub consumer_period: u64,
}

impl Default for ReceiverSection {
    fn default() -> Self {
        let d = ReceiverConfig::default();
        ReceiverSection {
            n_cpu: d.n_cpu,
            max_slaves: d.max_slaves,
            wakeup_threshold: d.wakeup_threshold,
            control_retries: d.control_retries,
            control_timeout: d.control_timeout,
            consumer_rate: None,
            consumer_period: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub total_packets: Option<u64>,
    pub total_words: Option<u64>,
    #[serde(default)]
    pub pattern: DataPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub time_limit: u64,
    pub trace: bool,
    pub trace_path: Option<PathBuf>,
    pub json_path: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { time_limit: Scenario::default().time_limit, trace: false, trace_path: None, json_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub sender: SenderSection,
    #[serde(default)]
    pub receiver: ReceiverSection,
    #[serde(default)]
    pub channel: ChannelConfig,
    pub source: SourceSection,
    #[serde(default)]
    pub commands: Vec<CommandSpec>,
    #[serde(default)]
    pub command_stream: Option<CommandStream>,
    #[serde(default)]
    pub run: RunSection,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioFileError> {
        let file: ScenarioFile = toml::from_str(text)?;
        file.source_words()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioFileError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    fn source_words(&self) -> Result<u64, ScenarioFileError> {
        let invalid = |message: &str| ScenarioFileError::Invalid { key: "source", message: message.into() };
        match (self.source.total_packets, self.source.total_words) {
            (Some(p), None) => p.checked_mul(WORDS_PER_PACKET as u64).ok_or_else(|| invalid("total_packets is too large")),
            (None, Some(w)) => Ok(w),
            (Some(_), Some(_)) => Err(invalid("give total_packets or total_words, not both")),
            (None, None) => Err(invalid("total_packets or total_words is required")),
        }
    }

    /// Builds the runnable scenario; `seed` overrides `channel.seed`.
    pub fn to_scenario(&self, seed: Option<u64>) -> Result<Scenario, ScenarioFileError> {
        if self.sender.count == 0 {
            return Err(ScenarioFileError::Invalid { key: "sender.count", message: "must be at least 1".into() });
        }
        let receiver = ReceiverConfig {
            n_cpu: self.receiver.n_cpu,
            max_slaves: self.receiver.max_slaves,
            wakeup_threshold: self.receiver.wakeup_threshold,
            control_retries: self.receiver.control_retries,
            control_timeout: self.receiver.control_timeout,
            ..Default::default()
        };
        let consumer = match self.receiver.consumer_rate {
            None => ConsumerModel::Unlimited,
            Some(rate) => ConsumerModel::Limited { rate, period: self.receiver.consumer_period },
        };
        let mut channel = self.channel.clone();
        if let Some(seed) = seed {
            channel.seed = seed;
        }
        let template = SenderConfig {
            n_fpga: self.sender.n_fpga,
            early_retransmit: self.sender.early_retransmit,
            retransmit_holdoff: self.sender.retransmit_holdoff,
            delay: self.sender.delay,
            ..Default::default()
        };
        let scenario = Scenario {
            receiver,
            channel,
            source: SourceModel { total_words: self.source_words()?, pattern: self.source.pattern },
            consumer,
            commands: self.commands.clone(),
            command_stream: self.command_stream,
            time_limit: self.run.time_limit,
            trace: self.run.trace || self.run.trace_path.is_some(),
            ..Default::default()
        }
        .with_senders(self.sender.count, template);
        scenario.validate().map_err(|e| ScenarioFileError::Invalid { key: "scenario", message: e.to_string() })?;
        Ok(scenario)
    }
}
