use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::FrameInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Sender to receiver.
    Up,
    /// Receiver to sender.
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

/// Explicit drop, overriding the random loss model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedLoss {
    /// The `ordinal`-th frame (from 0) sent in `direction`.
    Ordinal { direction: Direction, ordinal: u64 },
    /// The `nth` (from 0) frame of kind `frame` carrying packet number `packet`.
    Match {
        direction: Direction,
        frame: String,
        packet: u32,
        #[serde(default)]
        nth: u32,
    },
}

impl ScriptedLoss {
    fn direction(&self) -> Direction {
        match self {
            ScriptedLoss::Ordinal { direction, .. } | ScriptedLoss::Match { direction, .. } => *direction,
        }
    }
}

/// Link model shared by every sender/receiver pair. Times are byte-times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub loss_up: f64,
    pub loss_down: f64,
    pub latency: u64,
    /// Extra delay drawn uniformly from `0..=jitter`.
    pub jitter: u64,
    pub reorder_probability: f64,
    /// Only used to convert byte-times into seconds.
    pub line_rate_bytes_per_us: f64,
    /// Preamble, start delimiter and inter-frame gap per frame.
    pub framing_overhead: u64,
    pub seed: u64,
    pub scripted_losses: Vec<ScriptedLoss>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            loss_up: 0.0,
            loss_down: 0.0,
            latency: 1250,
            jitter: 0,
            reorder_probability: 0.0,
            line_rate_bytes_per_us: 1250.0,
            framing_overhead: 20,
            seed: 42,
            scripted_losses: Vec::new(),
        }
    }
}

impl ChannelConfig {
    pub fn with_loss(mut self, p: f64) -> Self {
        self.loss_up = p;
        self.loss_down = p;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("loss_up", self.loss_up),
            ("loss_down", self.loss_down),
            ("reorder_probability", self.reorder_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must be within [0, 1], got {p}"));
            }
        }
        if !(self.line_rate_bytes_per_us > 0.0) {
            return Err("line_rate_bytes_per_us must be positive".into());
        }
        for dir in [Direction::Up, Direction::Down] {
            let ordinals: Vec<u64> = self
                .scripted_losses
                .iter()
                .filter_map(|l| match l {
                    ScriptedLoss::Ordinal { direction, ordinal } if *direction == dir => Some(*ordinal),
                    _ => None,
                })
                .collect();
            if ordinals.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("scripted loss ordinals for {} must be strictly increasing", dir.as_str()));
            }
        }
        Ok(())
    }

    /// Converts byte-times to seconds at the configured line rate.
    pub fn seconds(&self, byte_times: u64) -> f64 {
        byte_times as f64 / (self.line_rate_bytes_per_us * 1e6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Dropped,
    /// Delivery event `id` due at `at`. `swapped_with` names the earlier
    /// in-flight frame whose delivery slot this frame took.
    Scheduled { id: u64, at: u64, swapped_with: Option<u64> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ChannelCounters {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub data_frames_sent: u64,
}

/// One direction of a link.
#[derive(Debug)]
pub struct Channel {
    direction: Direction,
    loss: f64,
    latency: u64,
    jitter: u64,
    reorder: f64,
    overhead: u64,
    rng: ChaCha8Rng,
    ordinal_drops: Vec<u64>,
    match_drops: Vec<(String, u32, u32)>,
    match_seen: HashMap<(String, u32), u32>,
    busy_until: u64,
    next_id: u64,
    in_flight: HashMap<u64, (FrameInfo, Vec<u8>)>,
    last_scheduled: Option<(u64, u64)>,
    counters: ChannelCounters,
}

impl Channel {
    /// `stream` selects an independent random substream for this direction.
    pub fn new(config: &ChannelConfig, direction: Direction, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        let mut ordinal_drops = Vec::new();
        let mut match_drops = Vec::new();
        for l in config.scripted_losses.iter().filter(|l| l.direction() == direction) {
            match l {
                ScriptedLoss::Ordinal { ordinal, .. } => ordinal_drops.push(*ordinal),
                ScriptedLoss::Match { frame, packet, nth, .. } => match_drops.push((frame.clone(), *packet, *nth)),
            }
        }
        ordinal_drops.sort_unstable();
        Channel {
            direction,
            loss: match direction {
                Direction::Up => config.loss_up,
                Direction::Down => config.loss_down,
            },
            latency: config.latency,
            jitter: config.jitter,
            reorder: config.reorder_probability,
            overhead: config.framing_overhead,
            rng,
            ordinal_drops,
            match_drops,
            match_seen: HashMap::new(),
            busy_until: 0,
            next_id: 0,
            in_flight: HashMap::new(),
            last_scheduled: None,
            counters: ChannelCounters::default(),
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn counters(&self) -> ChannelCounters {
        self.counters
    }

    /// Time at which the transmitter finishes the frame currently on the wire.
    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }

    pub fn is_idle(&self, now: u64) -> bool {
        self.busy_until <= now
    }

    pub fn serialization_time(&self, len: usize) -> u64 {
        len as u64 + self.overhead
    }

    fn scripted_drop(&mut self, ordinal: u64, info: &FrameInfo) -> bool {
        let mut drop = self.ordinal_drops.binary_search(&ordinal).is_ok();
        if let Some(packet) = info.packet {
            if self.match_drops.iter().any(|(k, p, _)| k == info.kind && *p == packet) {
                let seen = self.match_seen.entry((info.kind.to_string(), packet)).or_insert(0);
                let nth = *seen;
                *seen += 1;
                drop |= self.match_drops.iter().any(|(k, p, n)| k == info.kind && *p == packet && *n == nth);
            }
        }
        drop
    }

    /// Puts a frame on the wire at `now` (or when the transmitter frees up).
    pub fn send(&mut self, info: FrameInfo, bytes: Vec<u8>, now: u64) -> SendOutcome {
        let ordinal = self.counters.sent;
        self.counters.sent += 1;
        if info.is_data() {
            self.counters.data_frames_sent += 1;
        }
        // Fixed draw order per frame keeps runs reproducible.
        let loss_draw: f64 = self.rng.gen();
        let jitter_draw = if self.jitter > 0 { self.rng.gen_range(0..=self.jitter) } else { 0 };
        let reorder_draw: f64 = self.rng.gen();

        let start = now.max(self.busy_until);
        self.busy_until = start + self.serialization_time(bytes.len());
        if self.scripted_drop(ordinal, &info) || loss_draw < self.loss {
            self.counters.dropped += 1;
            return SendOutcome::Dropped;
        }
        let mut at = self.busy_until + self.latency + jitter_draw;
        let id = self.next_id;
        self.next_id += 1;
        self.in_flight.insert(id, (info, bytes));
        let mut swapped_with = None;
        if reorder_draw < self.reorder {
            if let Some((prev_id, prev_at)) = self.last_scheduled {
                if self.in_flight.contains_key(&prev_id) {
                    // Swap contents: the earlier delivery slot carries the new frame.
                    let new = self.in_flight.remove(&id).expect("just inserted");
                    let old = self.in_flight.insert(prev_id, new).expect("checked above");
                    self.in_flight.insert(id, old);
                    swapped_with = Some(prev_id);
                    at = at.max(prev_at);
                }
            }
        }
        self.last_scheduled = Some((id, at));
        SendOutcome::Scheduled { id, at, swapped_with }
    }

    /// Takes the frame for delivery event `id`.
    pub fn deliver(&mut self, id: u64) -> Option<(FrameInfo, Vec<u8>)> {
        let f = self.in_flight.remove(&id)?;
        self.counters.delivered += 1;
        Some(f)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}
