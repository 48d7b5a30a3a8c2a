//! Model of the FPGA transmitter core.
//!
//! Words from the data source are packed into 1024-word packets held in a
//! [`DescriptorRing`]. A scan over the ring emits every valid, unconfirmed
//! packet (first transmissions and periodic retransmissions alike); acks
//! confirm packets and free the tail, and also trigger early retransmission
//! of packets whose last emission predates the acknowledged frame. Commands
//! are executed once per command sequence number and their responses ride in
//! the next data frame or, when no data is waiting, in a dedicated packet.

mod delay;
mod ring;

use std::collections::VecDeque;
use std::fmt;

use bytes::{BufMut, Bytes, BytesMut};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    encode_frame, AckKind, AckPayload, CommandRequest, CommandResponseField, DataPayload, FrameHeader, LastDataPayload, MacAddress,
    Payload, WireFrame,
};
use crate::profile::{
    CMD_RESET, CMD_START, CMD_STOP, LAST_PACKET_DATA_BYTES, PACKET_BYTES, WORDS_PER_PACKET, WORD_BYTES,
};
use crate::serial::{CommandSeq, FrameSeq, PacketNumber};

pub use delay::{AdaptRecord, DelayAdapter, DelayTuning};
pub use ring::{DescriptorRing, PacketDescriptor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SenderError {
    #[error("bad sender configuration: {0}")]
    BadConfig(String),
    #[error("core not started")]
    NotStarted,
    #[error("ack for packet {packet} beyond last transmitted packet {last_transmitted:?}")]
    ProtocolError { packet: PacketNumber, last_transmitted: Option<PacketNumber> },
}

/// Rule used to pick packets for early retransmission when an ack arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyRetransmit {
    /// Unconfirmed packets whose last frame sequence number is older than the ack's.
    #[default]
    SequenceNumbers,
    /// Unconfirmed packets whose packet number is older than the acked one.
    PacketNumbers,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SenderConfig {
    /// Ring holds `2^n_fpga` packets; this is the transmission window.
    pub n_fpga: u32,
    pub mac: MacAddress,
    pub peer_mac: MacAddress,
    pub delay: DelayTuning,
    pub early_retransmit: EarlyRetransmit,
    /// Minimum byte-times between two emissions of the same packet by the
    /// ring scan. Zero rescans immediately.
    pub retransmit_holdoff: u64,
}

impl Default for SenderConfig {
    fn default() -> Self {
        SenderConfig {
            n_fpga: 8,
            mac: MacAddress::local(1),
            peer_mac: MacAddress::local(0),
            delay: DelayTuning::default(),
            early_retransmit: EarlyRetransmit::default(),
            retransmit_holdoff: 65_536,
        }
    }
}

/// User command execution callback: `(code, argument) -> return value`.
pub type CommandHook = Box<dyn FnMut(u16, u32) -> [u8; 8] + Send>;

fn echo_hook() -> CommandHook {
    Box::new(|code, arg| {
        let mut v = [0u8; 8];
        v[..2].copy_from_slice(&code.to_be_bytes());
        v[4..].copy_from_slice(&arg.to_be_bytes());
        v
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Idle,
    Running,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionKind {
    Fresh,
    Retransmit,
    EarlyRetransmit,
    CommandResponse,
}

impl EmissionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmissionKind::Fresh => "sent",
            EmissionKind::Retransmit => "retransmit",
            EmissionKind::EarlyRetransmit => "early_retransmit",
            EmissionKind::CommandResponse => "sent",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Emission {
    pub header: FrameHeader,
    pub payload: Payload,
    pub kind: EmissionKind,
    /// Early retransmission the sequence-number rule would have suppressed.
    pub spurious: bool,
}

impl Emission {
    pub fn encode(&self) -> Vec<u8> {
        encode_frame(&self.header, &self.payload).expect("sender only builds well-formed payloads")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SenderCounters {
    pub data_frames_sent: u64,
    pub fresh_transmissions: u64,
    pub retransmissions: u64,
    pub early_retransmissions: u64,
    pub spurious_retransmissions: u64,
    pub response_packets_sent: u64,
    pub acks_received: u64,
    pub stale_acks: u64,
    pub nacks_received: u64,
    pub protocol_errors: u64,
    pub commands_executed: u64,
    pub duplicate_commands: u64,
    pub last_delay_echo: u32,
}

/// What handling a command request did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandOutcome {
    Reset,
    Executed(CommandResponseField),
    Resent(CommandResponseField),
}

pub struct SenderCore {
    config: SenderConfig,
    hook: CommandHook,
    state: RunState,
    ring: DescriptorRing,
    /// Words of the packet under construction at the head.
    filling: BytesMut,
    /// Final packet waiting for a free slot after STOP.
    pending_flush: Option<(Bytes, u64)>,
    next_seq: FrameSeq,
    last_transmitted: Option<PacketNumber>,
    cursor: PacketNumber,
    early_queue: VecDeque<PacketNumber>,
    last_data_emit: Option<u64>,
    last_csn: Option<CommandSeq>,
    last_response: CommandResponseField,
    pending_response: Option<CommandResponseField>,
    adapter: DelayAdapter,
    counters: SenderCounters,
}

impl fmt::Debug for SenderCore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SenderCore")
            .field("state", &self.state)
            .field("tail", &self.ring.tail_packet())
            .field("head", &self.ring.head_packet())
            .field("next_seq", &self.next_seq)
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl SenderCore {
    pub fn new(config: SenderConfig) -> Result<Self, SenderError> {
        Self::with_hook(config, echo_hook())
    }

    pub fn with_hook(config: SenderConfig, hook: CommandHook) -> Result<Self, SenderError> {
        if !(1..=32).contains(&config.n_fpga) {
            return Err(SenderError::BadConfig(format!("n_fpga must be in 1..=32, got {}", config.n_fpga)));
        }
        config.delay.validate().map_err(SenderError::BadConfig)?;
        Ok(SenderCore {
            hook,
            state: RunState::Idle,
            ring: DescriptorRing::new(config.n_fpga),
            filling: BytesMut::with_capacity(PACKET_BYTES),
            pending_flush: None,
            next_seq: FrameSeq(0),
            last_transmitted: None,
            cursor: PacketNumber(0),
            early_queue: VecDeque::new(),
            last_data_emit: None,
            last_csn: None,
            last_response: CommandResponseField::NONE,
            pending_response: None,
            adapter: DelayAdapter::new(config.delay),
            counters: SenderCounters::default(),
            config,
        })
    }

    pub fn config(&self) -> &SenderConfig {
        &self.config
    }

    pub fn state(&self) -> RunState {
        self.state
    }

    pub fn ring(&self) -> &DescriptorRing {
        &self.ring
    }

    pub fn counters(&self) -> SenderCounters {
        self.counters
    }

    pub fn current_delay(&self) -> u32 {
        self.adapter.current_delay()
    }

    pub fn adapt_history(&self) -> &[AdaptRecord] {
        self.adapter.history()
    }

    /// Ready status: words can be accepted right now.
    pub fn is_ready(&self) -> bool {
        self.state == RunState::Running && !self.ring.is_full()
    }

    /// Words buffered in the partially filled head packet.
    pub fn partial_words(&self) -> usize {
        self.filling.len() / WORD_BYTES
    }

    /// Nothing left to transmit or confirm.
    pub fn is_drained(&self) -> bool {
        self.ring.occupied() == 0 && self.pending_flush.is_none() && self.pending_response.is_none()
    }

    /// Appends words to the head packet, sealing full packets into the ring.
    /// Returns how many words were taken; zero while the ring is full.
    pub fn offer_words(&mut self, words: &[u64]) -> Result<usize, SenderError> {
        if self.state != RunState::Running {
            return Err(SenderError::NotStarted);
        }
        let mut taken = 0;
        while taken < words.len() && !self.ring.is_full() {
            let room = WORDS_PER_PACKET - self.partial_words();
            let n = room.min(words.len() - taken);
            for &w in &words[taken..taken + n] {
                self.filling.put_u64(w);
            }
            taken += n;
            if self.filling.len() == PACKET_BYTES {
                let data = self.filling.split().freeze();
                self.ring.push(data, None);
            }
        }
        Ok(taken)
    }

    fn flush_last_packet(&mut self) {
        let valid_words = self.partial_words() as u64;
        let mut data = self.filling.split();
        data.resize(LAST_PACKET_DATA_BYTES, 0);
        self.pending_flush = Some((data.freeze(), valid_words));
        self.place_pending_flush();
    }

    fn place_pending_flush(&mut self) {
        if !self.ring.is_full() {
            if let Some((data, valid_words)) = self.pending_flush.take() {
                self.ring.push(data, Some(valid_words));
            }
        }
    }

    /// Processes an ACK: confirms the packet, frees the tail, then schedules
    /// early retransmissions.
    pub fn handle_ack(&mut self, seq: FrameSeq, packet: PacketNumber, delay_echo: u32) -> Result<(), SenderError> {
        self.counters.acks_received += 1;
        self.counters.last_delay_echo = delay_echo;
        let beyond = match self.last_transmitted {
            None => true,
            Some(last) => packet.is_newer_than(last),
        };
        if beyond {
            self.counters.protocol_errors += 1;
            return Err(SenderError::ProtocolError { packet, last_transmitted: self.last_transmitted });
        }
        match self.ring.get_mut(packet) {
            Some(slot) if slot.desc.sent => slot.desc.confirmed = true,
            _ => self.counters.stale_acks += 1,
        }
        if self.ring.advance_tail() > 0 {
            self.place_pending_flush();
        }
        self.schedule_early(seq, packet);
        Ok(())
    }

    fn schedule_early(&mut self, ack_seq: FrameSeq, ack_pkt: PacketNumber) {
        let mode = self.config.early_retransmit;
        if mode == EarlyRetransmit::Disabled {
            return;
        }
        for slot in self.ring.slots.iter_mut() {
            let d = &slot.desc;
            if !d.sent || d.confirmed || slot.queued_early {
                continue;
            }
            let sent_before_ack = ack_seq.is_newer_than(d.seq);
            let pick = match mode {
                EarlyRetransmit::SequenceNumbers => sent_before_ack,
                EarlyRetransmit::PacketNumbers => ack_pkt.is_newer_than(d.pkt),
                EarlyRetransmit::Disabled => false,
            };
            if pick {
                slot.queued_early = true;
                slot.spurious = !sent_before_ack;
                self.early_queue.push_back(d.pkt);
            }
        }
    }

    /// Processes a NACK: the named packet jumps to the front of the queue.
    pub fn handle_nack(&mut self, _seq: FrameSeq, packet: PacketNumber) {
        self.counters.nacks_received += 1;
        if let Some(slot) = self.ring.get_mut(packet) {
            if slot.desc.sent && !slot.desc.confirmed {
                slot.spurious = false;
                if slot.queued_early {
                    self.early_queue.retain(|&p| p != packet);
                }
                slot.queued_early = true;
                self.early_queue.push_front(packet);
            }
        }
    }

    /// Executes a command request. A repeated CSN only re-queues the last response.
    pub fn handle_command(&mut self, code: u16, csn: CommandSeq, argument: u32) -> CommandOutcome {
        if code == CMD_RESET {
            self.reset();
            return CommandOutcome::Reset;
        }
        if self.last_csn == Some(csn) {
            self.counters.duplicate_commands += 1;
            self.pending_response = Some(self.last_response);
            return CommandOutcome::Resent(self.last_response);
        }
        let return_value = match code {
            CMD_START => {
                if self.state != RunState::Running {
                    self.state = RunState::Running;
                }
                [0; 8]
            }
            CMD_STOP => {
                if self.state == RunState::Running {
                    self.state = RunState::Stopped;
                    self.flush_last_packet();
                }
                [0; 8]
            }
            _ => {
                self.counters.commands_executed += 1;
                (self.hook)(code, argument)
            }
        };
        let response = CommandResponseField { command_code: code, csn, return_value };
        self.last_csn = Some(csn);
        self.last_response = response;
        self.pending_response = Some(response);
        CommandOutcome::Executed(response)
    }

    /// Dispatches a decoded frame addressed to this core.
    pub fn handle_frame(&mut self, frame: &WireFrame) -> Result<Option<CommandOutcome>, SenderError> {
        match &frame.payload {
            Payload::Ack(AckPayload { kind: AckKind::Ack, seq, packet, delay_echo }) => {
                self.handle_ack(*seq, *packet, *delay_echo).map(|_| None)
            }
            Payload::Ack(AckPayload { kind: AckKind::Nack, seq, packet, .. }) => {
                self.handle_nack(*seq, *packet);
                Ok(None)
            }
            Payload::CommandRequest(CommandRequest { command_code, csn, argument }) => {
                Ok(Some(self.handle_command(*command_code, *csn, *argument)))
            }
            _ => Ok(None),
        }
    }

    fn reset(&mut self) {
        let config = self.config.clone();
        let hook = std::mem::replace(&mut self.hook, Box::new(|_, _| [0; 8]));
        *self = SenderCore::with_hook(config, hook).expect("config was validated at construction");
    }

    fn delay_elapsed(&self, now: u64) -> bool {
        match self.last_data_emit {
            None => true,
            Some(t) => now >= t + self.adapter.current_delay() as u64,
        }
    }

    fn scan_eligible(&self, slot: &ring::Slot, now: u64) -> bool {
        let d = &slot.desc;
        d.valid && !d.confirmed && (!d.sent || now >= slot.last_emit + self.config.retransmit_holdoff)
    }

    fn next_early(&mut self) -> Option<usize> {
        while let Some(&pkt) = self.early_queue.front() {
            match self.ring.offset_of(pkt) {
                Some(off) if !self.ring.slots[off].desc.confirmed => return Some(off),
                Some(off) => {
                    self.ring.slots[off].queued_early = false;
                    self.early_queue.pop_front();
                }
                None => {
                    self.early_queue.pop_front();
                }
            }
        }
        None
    }

    fn next_scanned(&self, now: u64) -> Option<usize> {
        let len = self.ring.occupied();
        if len == 0 {
            return None;
        }
        let start = self.ring.offset_of(self.cursor).unwrap_or(0);
        (start..len).chain(0..start).find(|&off| self.scan_eligible(&self.ring.slots[off], now))
    }

    /// Next frame to put on the wire at time `now`, if any.
    pub fn poll_output(&mut self, now: u64) -> Option<Emission> {
        let early = self.next_early();
        let scanned = if early.is_none() { self.next_scanned(now) } else { None };
        let Some(off) = early.or(scanned) else {
            let response = self.pending_response.take()?;
            self.counters.response_packets_sent += 1;
            return Some(Emission {
                header: self.header(),
                payload: Payload::CommandResponse(response),
                kind: EmissionKind::CommandResponse,
                spurious: false,
            });
        };
        if !self.delay_elapsed(now) {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq = seq.next();
        let delay = self.adapter.current_delay();
        let cmd_response = self.pending_response.take().unwrap_or(CommandResponseField::NONE);

        let slot = &mut self.ring.slots[off];
        let kind = if early.is_some() {
            EmissionKind::EarlyRetransmit
        } else if slot.desc.sent {
            EmissionKind::Retransmit
        } else {
            EmissionKind::Fresh
        };
        let spurious = early.is_some() && slot.spurious;
        slot.desc.sent = true;
        slot.desc.seq = seq;
        slot.last_emit = now;
        slot.queued_early = false;
        slot.spurious = false;
        let packet = slot.desc.pkt;
        let payload = match slot.valid_words {
            None => Payload::Data(DataPayload { seq, packet, delay, cmd_response, data: slot.data.clone() }),
            Some(valid_words) => Payload::LastData(LastDataPayload {
                seq,
                packet,
                delay,
                cmd_response,
                data: slot.data.clone(),
                valid_words,
            }),
        };
        if early.is_some() {
            self.early_queue.pop_front();
        } else {
            self.cursor = packet.next();
        }
        if self.last_transmitted.is_none_or(|last| packet.is_newer_than(last)) {
            self.last_transmitted = Some(packet);
        }
        self.last_data_emit = Some(now);

        let c = &mut self.counters;
        c.data_frames_sent += 1;
        match kind {
            EmissionKind::Fresh => c.fresh_transmissions += 1,
            EmissionKind::EarlyRetransmit => {
                c.retransmissions += 1;
                c.early_retransmissions += 1;
            }
            _ => c.retransmissions += 1,
        }
        if spurious {
            c.spurious_retransmissions += 1;
        }
        self.adapter.record(kind != EmissionKind::Fresh);
        Some(Emission { header: self.header(), payload, kind, spurious })
    }

    /// Earliest time at which `poll_output` may return something new, or
    /// `None` when the core has nothing to send until an external event.
    pub fn next_wakeup(&self, now: u64) -> Option<u64> {
        if self.pending_response.is_some() {
            return Some(now);
        }
        let gate = self.last_data_emit.map_or(now, |t| (t + self.adapter.current_delay() as u64).max(now));
        let mut best: Option<u64> = None;
        let has_early = self
            .early_queue
            .iter()
            .any(|&p| self.ring.offset_of(p).is_some_and(|off| !self.ring.slots[off].desc.confirmed));
        if has_early {
            best = Some(gate);
        }
        for slot in &self.ring.slots {
            let d = &slot.desc;
            if d.confirmed {
                continue;
            }
            let eligible_at = if d.sent { slot.last_emit + self.config.retransmit_holdoff } else { now };
            let t = eligible_at.max(gate);
            best = Some(best.map_or(t, |b| b.min(t)));
        }
        best
    }

    fn header(&self) -> FrameHeader {
        FrameHeader::new(self.config.peer_mac, self.config.mac)
    }
}
