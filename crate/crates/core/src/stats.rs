//! Run-level counters and derived efficiency figures.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::netsim::ChannelConfig;

/// Aggregate of one scenario run. Field order is the JSON order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub data_frames_sent: u64,
    pub retransmissions: u64,
    pub early_retransmissions: u64,
    pub spurious_retransmissions: u64,
    pub acks_sent: u64,
    pub reacks: u64,
    pub protocol_errors: u64,
    pub commands_executed: u64,
    pub command_retries: u64,
    pub command_timeouts: u64,
    pub bytes_delivered_to_consumer: u64,
    /// Byte-times from start until the stop condition held.
    pub simulated_duration: u64,
    pub simulated_seconds: f64,
    pub goodput_fraction: f64,
    pub final_delay: u32,
    pub max_delay: u32,
    pub links: u64,
    pub frames_sent_up: u64,
    pub frames_dropped_up: u64,
    pub frames_delivered_up: u64,
    pub frames_sent_down: u64,
    pub frames_dropped_down: u64,
    pub frames_delivered_down: u64,
    pub channel_data_frames_up: u64,
    pub commands_completed: u64,
    pub end_of_transmission_events: u64,
    pub words_verified: u64,
    pub integrity_errors: u64,
    pub completed: bool,
    pub command_rate: Option<f64>,
}

/// Consumer bytes over link capacity for the simulated duration. Time is
/// counted in byte-times, so one link moves one byte per unit.
pub fn goodput_fraction(stats: &ScenarioStats, _channel: &ChannelConfig) -> f64 {
    let capacity = stats.simulated_duration.saturating_mul(stats.links.max(1));
    if capacity == 0 {
        return 0.0;
    }
    (stats.bytes_delivered_to_consumer as f64 / capacity as f64).clamp(0.0, 1.0)
}

/// Executed user commands per simulated second; `None` for a zero duration.
pub fn command_rate(stats: &ScenarioStats) -> Option<f64> {
    (stats.simulated_seconds > 0.0).then(|| stats.commands_executed as f64 / stats.simulated_seconds)
}

impl ScenarioStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    /// Aligned `name  value` lines.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("stats serialize");
        let map = value.as_object().expect("struct serializes to an object");
        let width = map.keys().map(String::len).max().unwrap_or(0);
        let mut out = String::new();
        // serde_json's Map sorts keys; FIELD_ORDER keeps declaration order.
        for key in FIELD_ORDER {
            let v = &map[*key];
            let shown = match v {
                serde_json::Value::Null => "-".to_string(),
                serde_json::Value::Number(n) if n.is_f64() => format!("{:.6}", n.as_f64().unwrap_or(0.0)),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{key:<width$}  {shown}");
        }
        out
    }
}

const FIELD_ORDER: &[&str] = &[
    "data_frames_sent",
    "retransmissions",
    "early_retransmissions",
    "spurious_retransmissions",
    "acks_sent",
    "reacks",
    "protocol_errors",
    "commands_executed",
    "command_retries",
    "command_timeouts",
    "bytes_delivered_to_consumer",
    "simulated_duration",
    "simulated_seconds",
    "goodput_fraction",
    "final_delay",
    "max_delay",
    "links",
    "frames_sent_up",
    "frames_dropped_up",
    "frames_delivered_up",
    "frames_sent_down",
    "frames_dropped_down",
    "frames_delivered_down",
    "channel_data_frames_up",
    "commands_completed",
    "end_of_transmission_events",
    "words_verified",
    "integrity_errors",
    "completed",
    "command_rate",
];
