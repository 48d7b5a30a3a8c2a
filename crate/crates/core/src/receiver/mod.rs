//! Model of the host-side driver.
//!
//! Each associated sender ("slave") gets a [`SlaveContext`] holding its
//! receive buffer, error flags and the state of its command channel. The
//! operations mirror the driver's ioctl set: associate, start, stop, reset,
//! free, user command, read/write pointers, wake-up threshold, buffer length.
//! All methods take `&mut self`; concurrent users wrap the core in a lock.

mod buffer;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    decode_frame, encode_frame, peek_header, AckKind, AckPayload, CodecError, CommandRequest, CommandResponseField,
    FrameHeader, MacAddress, Payload,
};
use crate::profile::{CMD_RESET, CMD_START, CMD_STOP, PACKET_BYTES};
use crate::serial::{CommandSeq, FrameSeq, PacketNumber};

pub use buffer::{Placement, Pointers, ReceiverSlotBuffer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReceiverError {
    #[error("bad receiver configuration: {0}")]
    BadConfig(String),
    #[error("all {0} slave contexts are in use")]
    TooManySlaves(usize),
    #[error("{0} is already associated")]
    AlreadyAssociated(MacAddress),
    #[error("slave {0} is not associated")]
    NotAssociated(usize),
    #[error("consume of {requested} bytes exceeds the {available} available")]
    OverConsume { requested: u64, available: u64 },
    #[error("a command is already pending on slave {0}")]
    CommandBusy(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    /// Each slave buffer holds `2^n_cpu` packets.
    pub n_cpu: u32,
    pub max_slaves: usize,
    pub mac: MacAddress,
    /// Initial wake-up threshold in bytes for new slaves.
    pub wakeup_threshold: u64,
    /// Retries and per-try timeout used for START and STOP.
    pub control_retries: u32,
    pub control_timeout: u64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            n_cpu: 10,
            max_slaves: 8,
            mac: MacAddress::local(0),
            wakeup_threshold: 0,
            control_retries: 16,
            control_timeout: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlaveId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlaveState {
    Associated,
    Running,
    Finished,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorFlags {
    pub bad_version: bool,
    pub bad_type: bool,
    pub protocol_error: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    DataAvailable { available: u64 },
    EndOfTransmission,
    CommandComplete { code: u16, csn: CommandSeq, value: [u8; 8] },
    CommandTimeout { code: u16, csn: CommandSeq },
}

/// Wake-up delivered to the consumer side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsumerEvent {
    pub slave: SlaveId,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingCommand {
    code: u16,
    csn: CommandSeq,
    argument: u32,
    retries_left: u32,
    timeout: u64,
    /// Set once the current attempt is on the wire.
    deadline: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SlaveCounters {
    pub data_frames: u64,
    pub packets_stored: u64,
    pub acks_sent: u64,
    pub reacks: u64,
    pub dropped_no_space: u64,
    pub protocol_errors: u64,
    pub bad_version: u64,
    pub bad_type: u64,
    pub command_requests_sent: u64,
    pub command_retries: u64,
    pub commands_completed: u64,
    pub command_timeouts: u64,
    pub stale_responses: u64,
    pub bytes_consumed: u64,
    pub end_of_transmission_events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct QueuedAck {
    ack: AckPayload,
    reack: bool,
}

#[derive(Debug, Clone)]
pub struct SlaveContext {
    pub mac: MacAddress,
    pub interface: u32,
    pub state: SlaveState,
    pub buffer: ReceiverSlotBuffer,
    pub wakeup_threshold: u64,
    pub errors: ErrorFlags,
    pub last_packet_flag: bool,
    pub end_of_transmission: bool,
    pub counters: SlaveCounters,
    pending: Option<PendingCommand>,
    next_csn: CommandSeq,
    acks: VecDeque<QueuedAck>,
    control: VecDeque<CommandRequest>,
}

impl SlaveContext {
    fn new(mac: MacAddress, interface: u32, n_cpu: u32, wakeup_threshold: u64) -> Self {
        SlaveContext {
            mac,
            interface,
            state: SlaveState::Associated,
            buffer: ReceiverSlotBuffer::new(n_cpu),
            wakeup_threshold,
            errors: ErrorFlags::default(),
            last_packet_flag: false,
            end_of_transmission: false,
            counters: SlaveCounters::default(),
            pending: None,
            next_csn: CommandSeq(0),
            acks: VecDeque::new(),
            control: VecDeque::new(),
        }
    }

    pub fn has_pending_command(&self) -> bool {
        self.pending.is_some()
    }

    fn fresh_csn(&mut self) -> CommandSeq {
        self.next_csn = self.next_csn.next();
        self.next_csn
    }
}

/// A frame the receiver wants on the wire.
#[derive(Debug, Clone)]
pub struct OutgoingFrame {
    pub header: FrameHeader,
    pub payload: Payload,
    /// Ack for a packet that had already been stored.
    pub reack: bool,
}

impl OutgoingFrame {
    pub fn encode(&self) -> Vec<u8> {
        encode_frame(&self.header, &self.payload).expect("receiver only builds well-formed payloads")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReceiverCounters {
    pub frames_received: u64,
    pub bad_fcs: u64,
    pub malformed: u64,
    pub unknown_source: u64,
}

#[derive(Debug)]
pub struct ReceiverCore {
    config: ReceiverConfig,
    slaves: Vec<Option<SlaveContext>>,
    unsolicited: VecDeque<(MacAddress, OutgoingFrame)>,
    counters: ReceiverCounters,
}

impl ReceiverCore {
    pub fn new(config: ReceiverConfig) -> Result<Self, ReceiverError> {
        if !(1..=32).contains(&config.n_cpu) {
            return Err(ReceiverError::BadConfig(format!("n_cpu must be in 1..=32, got {}", config.n_cpu)));
        }
        if config.max_slaves == 0 {
            return Err(ReceiverError::BadConfig("max_slaves must be positive".into()));
        }
        Ok(ReceiverCore {
            slaves: (0..config.max_slaves).map(|_| None).collect(),
            config,
            unsolicited: VecDeque::new(),
            counters: ReceiverCounters::default(),
        })
    }

    pub fn config(&self) -> &ReceiverConfig {
        &self.config
    }

    pub fn counters(&self) -> ReceiverCounters {
        self.counters
    }

    pub fn slave(&self, id: SlaveId) -> Result<&SlaveContext, ReceiverError> {
        self.slaves.get(id.0).and_then(Option::as_ref).ok_or(ReceiverError::NotAssociated(id.0))
    }

    fn slave_mut(&mut self, id: SlaveId) -> Result<&mut SlaveContext, ReceiverError> {
        self.slaves.get_mut(id.0).and_then(Option::as_mut).ok_or(ReceiverError::NotAssociated(id.0))
    }

    pub fn slave_ids(&self) -> impl Iterator<Item = SlaveId> + '_ {
        self.slaves.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| SlaveId(i))
    }

    fn find_slave(&self, mac: MacAddress) -> Option<SlaveId> {
        self.slaves.iter().position(|s| s.as_ref().is_some_and(|s| s.mac == mac)).map(SlaveId)
    }

    /// GETMAC: associates a sender MAC with a free context.
    pub fn open_slave(&mut self, mac: MacAddress, interface: u32) -> Result<SlaveId, ReceiverError> {
        if self.find_slave(mac).is_some() {
            return Err(ReceiverError::AlreadyAssociated(mac));
        }
        let free = self.slaves.iter().position(Option::is_none).ok_or(ReceiverError::TooManySlaves(self.slaves.len()))?;
        self.slaves[free] = Some(SlaveContext::new(mac, interface, self.config.n_cpu, self.config.wakeup_threshold));
        Ok(SlaveId(free))
    }

    /// FREEMAC.
    pub fn free_slave(&mut self, id: SlaveId) -> Result<(), ReceiverError> {
        self.slave_mut(id)?;
        self.slaves[id.0] = None;
        Ok(())
    }

    fn queue_command(&mut self, id: SlaveId, code: u16, argument: u32, retries: u32, timeout: u64) -> Result<CommandSeq, ReceiverError> {
        let s = self.slave_mut(id)?;
        if s.pending.is_some() {
            return Err(ReceiverError::CommandBusy(id.0));
        }
        let csn = s.fresh_csn();
        s.pending = Some(PendingCommand { code, csn, argument, retries_left: retries, timeout, deadline: None });
        Ok(csn)
    }

    /// STARTMAC.
    pub fn start(&mut self, id: SlaveId) -> Result<CommandSeq, ReceiverError> {
        let (r, t) = (self.config.control_retries, self.config.control_timeout);
        self.queue_command(id, CMD_START, 0, r, t)
    }

    /// STOPMAC.
    pub fn stop(&mut self, id: SlaveId) -> Result<CommandSeq, ReceiverError> {
        let (r, t) = (self.config.control_retries, self.config.control_timeout);
        self.queue_command(id, CMD_STOP, 0, r, t)
    }

    /// RESETMAC: one unconfirmed RESET frame; the stream state starts over.
    pub fn reset_slave(&mut self, id: SlaveId) -> Result<CommandSeq, ReceiverError> {
        let n_cpu = self.config.n_cpu;
        let s = self.slave_mut(id)?;
        let csn = s.fresh_csn();
        s.pending = None;
        s.acks.clear();
        s.buffer = ReceiverSlotBuffer::new(n_cpu);
        s.state = SlaveState::Associated;
        s.errors = ErrorFlags::default();
        s.last_packet_flag = false;
        s.end_of_transmission = false;
        s.control.push_back(CommandRequest { command_code: CMD_RESET, csn, argument: 0 });
        Ok(csn)
    }

    /// USERCMD: queues a command; it is resent with the same CSN every
    /// `timeout` until a response arrives or `retries` resends are used up.
    pub fn send_user_command(
        &mut self,
        id: SlaveId,
        code: u16,
        argument: u32,
        retries: u32,
        timeout: u64,
    ) -> Result<CommandSeq, ReceiverError> {
        self.queue_command(id, code, argument, retries, timeout)
    }

    /// READPTRS.
    pub fn read_pointers(&self, id: SlaveId) -> Result<Pointers, ReceiverError> {
        Ok(self.slave(id)?.buffer.pointers())
    }

    /// WRITEPTRS: marks `nbytes` as processed. Returns the new tail.
    pub fn consume(&mut self, id: SlaveId, nbytes: u64) -> Result<u64, ReceiverError> {
        let s = self.slave_mut(id)?;
        let tail = s.buffer.consume(nbytes).map_err(|available| ReceiverError::OverConsume { requested: nbytes, available })?;
        s.counters.bytes_consumed += nbytes;
        Ok(tail)
    }

    /// Copies unread bytes into `buf` without consuming them.
    pub fn peek(&self, id: SlaveId, buf: &mut [u8]) -> Result<usize, ReceiverError> {
        Ok(self.slave(id)?.buffer.peek(buf))
    }

    /// SETWAKEUP.
    pub fn set_wakeup_threshold(&mut self, id: SlaveId, bytes: u64) -> Result<(), ReceiverError> {
        self.slave_mut(id)?.wakeup_threshold = bytes;
        Ok(())
    }

    /// GETBUFLEN.
    pub fn buffer_len(&self, id: SlaveId) -> Result<u64, ReceiverError> {
        Ok(self.slave(id)?.buffer.capacity())
    }

    /// Reception routine for one frame arriving at time `now`.
    pub fn handle_frame(&mut self, bytes: &[u8], _now: u64) -> Vec<ConsumerEvent> {
        self.counters.frames_received += 1;
        let header = match peek_header(bytes) {
            Ok(h) => h,
            Err(CodecError::BadFcs { .. }) => {
                self.counters.bad_fcs += 1;
                return Vec::new();
            }
            Err(_) => {
                self.counters.malformed += 1;
                return Vec::new();
            }
        };
        let Some(id) = self.find_slave(header.source) else {
            self.counters.unknown_source += 1;
            let reset = CommandRequest { command_code: CMD_RESET, csn: CommandSeq(0), argument: 0 };
            let frame = OutgoingFrame {
                header: FrameHeader::new(header.source, self.config.mac),
                payload: Payload::CommandRequest(reset),
                reack: false,
            };
            self.unsolicited.push_back((header.source, frame));
            return Vec::new();
        };
        let slave = self.slaves[id.0].as_mut().expect("found above");
        let frame = match decode_frame(bytes) {
            Ok(f) => f,
            Err(CodecError::BadVersion { .. }) => {
                slave.errors.bad_version = true;
                slave.counters.bad_version += 1;
                return Vec::new();
            }
            Err(_) => {
                slave.errors.bad_type = true;
                slave.counters.bad_type += 1;
                return Vec::new();
            }
        };
        let mut events = Vec::new();
        match frame.payload {
            Payload::CommandResponse(resp) => service_response(id, slave, &resp, &mut events),
            Payload::Data(d) => {
                service_response(id, slave, &d.cmd_response, &mut events);
                receive_data(id, slave, d.seq, d.packet, d.delay, d.data, None, &mut events);
            }
            Payload::LastData(d) => {
                service_response(id, slave, &d.cmd_response, &mut events);
                let data = d.data;
                receive_data(id, slave, d.seq, d.packet, d.delay, data, Some(d.valid_words), &mut events);
            }
            Payload::Ack(_) | Payload::CommandRequest(_) => {
                slave.errors.bad_type = true;
                slave.counters.bad_type += 1;
            }
        }
        events
    }

    /// Resends or abandons commands whose response is overdue.
    pub fn poll_timers(&mut self, now: u64) -> Vec<ConsumerEvent> {
        let mut events = Vec::new();
        for (i, slot) in self.slaves.iter_mut().enumerate() {
            let Some(s) = slot.as_mut() else { continue };
            let Some(p) = s.pending.as_mut() else { continue };
            if p.deadline.is_some_and(|d| now >= d) {
                if p.retries_left > 0 {
                    p.retries_left -= 1;
                    p.deadline = None;
                    s.counters.command_retries += 1;
                } else {
                    let (code, csn) = (p.code, p.csn);
                    s.pending = None;
                    s.counters.command_timeouts += 1;
                    events.push(ConsumerEvent { slave: SlaveId(i), kind: EventKind::CommandTimeout { code, csn } });
                }
            }
        }
        events
    }

    /// Earliest pending command deadline across all slaves.
    pub fn next_deadline(&self) -> Option<u64> {
        self.slaves.iter().flatten().filter_map(|s| s.pending.and_then(|p| p.deadline)).min()
    }

    /// Next frame toward slave `id`: queued acks first, then a due command
    /// (re)transmission, then control frames.
    pub fn poll_outgoing(&mut self, id: SlaveId, now: u64) -> Option<OutgoingFrame> {
        let own = self.config.mac;
        let s = self.slaves.get_mut(id.0)?.as_mut()?;
        let header = FrameHeader::new(s.mac, own);
        if let Some(q) = s.acks.pop_front() {
            s.counters.acks_sent += 1;
            if q.reack {
                s.counters.reacks += 1;
            }
            return Some(OutgoingFrame { header, payload: Payload::Ack(q.ack), reack: q.reack });
        }
        if let Some(p) = s.pending.as_mut() {
            if p.deadline.is_none() {
                p.deadline = Some(now + p.timeout);
                s.counters.command_requests_sent += 1;
                let req = CommandRequest { command_code: p.code, csn: p.csn, argument: p.argument };
                return Some(OutgoingFrame { header, payload: Payload::CommandRequest(req), reack: false });
            }
        }
        let req = s.control.pop_front()?;
        Some(OutgoingFrame { header, payload: Payload::CommandRequest(req), reack: false })
    }

    /// RESET frames addressed to senders that are not associated.
    pub fn poll_unsolicited(&mut self) -> Option<(MacAddress, OutgoingFrame)> {
        self.unsolicited.pop_front()
    }

    /// True when slave `id` has a frame ready for `poll_outgoing`.
    pub fn has_outgoing(&self, id: SlaveId) -> bool {
        self.slave(id).is_ok_and(|s| {
            !s.acks.is_empty() || !s.control.is_empty() || s.pending.is_some_and(|p| p.deadline.is_none())
        })
    }
}

fn service_response(id: SlaveId, s: &mut SlaveContext, resp: &CommandResponseField, events: &mut Vec<ConsumerEvent>) {
    if !resp.is_present() {
        return;
    }
    match s.pending {
        Some(p) if p.csn == resp.csn => {
            s.pending = None;
            s.counters.commands_completed += 1;
            match resp.command_code {
                CMD_START if s.state == SlaveState::Associated => s.state = SlaveState::Running,
                _ => {}
            }
            events.push(ConsumerEvent {
                slave: id,
                kind: EventKind::CommandComplete { code: resp.command_code, csn: resp.csn, value: resp.return_value },
            });
        }
        _ => s.counters.stale_responses += 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn receive_data(
    id: SlaveId,
    s: &mut SlaveContext,
    seq: FrameSeq,
    packet: PacketNumber,
    delay: u32,
    data: bytes::Bytes,
    valid_words: Option<u64>,
    events: &mut Vec<ConsumerEvent>,
) {
    s.counters.data_frames += 1;
    let ack = AckPayload { kind: AckKind::Ack, seq, packet, delay_echo: delay };
    match s.buffer.classify(packet) {
        Placement::Duplicate => s.acks.push_back(QueuedAck { ack, reack: true }),
        Placement::AheadOfWindow => {
            s.errors.protocol_error = true;
            s.counters.protocol_errors += 1;
        }
        Placement::NoSpace => s.counters.dropped_no_space += 1,
        Placement::New(abs) => {
            let expected = if valid_words.is_some() { crate::profile::LAST_PACKET_DATA_BYTES } else { PACKET_BYTES };
            if data.len() != expected {
                s.errors.protocol_error = true;
                s.counters.protocol_errors += 1;
                return;
            }
            s.counters.packets_stored += 1;
            if valid_words.is_some() {
                s.last_packet_flag = true;
            }
            let advanced = s.buffer.store(abs, packet, data, valid_words);
            s.acks.push_back(QueuedAck { ack, reack: false });
            let available = s.buffer.available();
            if advanced > 0 && available >= s.wakeup_threshold {
                events.push(ConsumerEvent { slave: id, kind: EventKind::DataAvailable { available } });
            }
            if s.last_packet_flag && !s.end_of_transmission && s.buffer.is_complete() {
                s.end_of_transmission = true;
                s.state = SlaveState::Finished;
                s.counters.end_of_transmission_events += 1;
                events.push(ConsumerEvent { slave: id, kind: EventKind::EndOfTransmission });
            }
        }
    }
}
