use std::fmt;

use serde::Serialize;

use crate::codec::{AckKind, Payload};

use super::channel::Direction;

/// Summary of a frame for loss rules and trace output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FrameInfo {
    pub kind: &'static str,
    pub packet: Option<u32>,
    pub seq: Option<u16>,
}

impl FrameInfo {
    pub fn of(payload: &Payload) -> Self {
        match payload {
            Payload::Ack(a) => FrameInfo {
                kind: if a.kind == AckKind::Ack { "ack" } else { "nack" },
                packet: Some(a.packet.0),
                seq: Some(a.seq.0),
            },
            Payload::Data(d) => FrameInfo { kind: "data", packet: Some(d.packet.0), seq: Some(d.seq.0) },
            Payload::LastData(d) => FrameInfo { kind: "last", packet: Some(d.packet.0), seq: Some(d.seq.0) },
            Payload::CommandRequest(_) => FrameInfo { kind: "cmd", packet: None, seq: None },
            Payload::CommandResponse(_) => FrameInfo { kind: "resp", packet: None, seq: None },
        }
    }

    pub fn is_data(&self) -> bool {
        matches!(self.kind, "data" | "last")
    }
}

/// One line of the event trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub time: u64,
    pub link: usize,
    pub direction: Direction,
    pub frame: FrameInfo,
    pub action: &'static str,
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} link={} dir={} frame={} pkt={} seq={} action={}",
            self.time,
            self.link,
            self.direction.as_str(),
            self.frame.kind,
            opt(self.frame.packet),
            opt(self.frame.seq),
            self.action
        )
    }
}

/// Renders a trace as newline-terminated lines.
pub fn render(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}
