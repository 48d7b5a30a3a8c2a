//! Discrete-event duplex channel and scenario runner.
//!
//! Time is counted in byte-times: serializing a frame of `len` bytes takes
//! `len + framing_overhead` units. Each sender gets its own full-duplex link
//! to the receiver; both directions have an independent random substream
//! derived from the scenario seed, so a run is a pure function of its
//! scenario.

mod channel;
mod event;
mod trace;
mod workload;

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::decode_frame;
use crate::profile::{is_valid_command_code, CMD_STOP, CMD_USER_MIN};
use crate::receiver::{ConsumerEvent, EventKind, ReceiverConfig, ReceiverCore, SlaveId};
use crate::sender::{CommandHook, SenderConfig, SenderCore};
use crate::stats::{command_rate, goodput_fraction, ScenarioStats};

pub use channel::{Channel, ChannelConfig, ChannelCounters, Direction, ScriptedLoss, SendOutcome};
pub use event::EventQueue;
pub use trace::{render as render_trace, FrameInfo, TraceRecord};
pub use workload::{ConsumerModel, DataPattern, SourceModel, WordStream};

use workload::{Consumer, Source};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    BadScenario(String),
    #[error("scenario deadlock at t={time}: no pending events and the stream is not complete")]
    ScenarioDeadlock { time: u64 },
}

/// A user command issued at a fixed time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub at_time: u64,
    #[serde(default)]
    pub link: usize,
    pub code: u16,
    #[serde(default)]
    pub argument: u32,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout: u64,
}

fn default_retries() -> u32 {
    5
}

fn default_timeout() -> u64 {
    100_000
}

/// Back-to-back user commands on every link: a new one goes out as soon as
/// the previous one finished. Without `count` this runs while the source
/// still has data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandStream {
    pub code: u16,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout: u64,
    #[serde(default)]
    pub count: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub senders: Vec<SenderConfig>,
    pub receiver: ReceiverConfig,
    pub channel: ChannelConfig,
    pub source: SourceModel,
    pub consumer: ConsumerModel,
    pub commands: Vec<CommandSpec>,
    pub command_stream: Option<CommandStream>,
    /// Run ends unfinished once the next event lies beyond this time.
    pub time_limit: u64,
    pub trace: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            senders: vec![SenderConfig::default()],
            receiver: ReceiverConfig::default(),
            channel: ChannelConfig::default(),
            source: SourceModel { total_words: 0, pattern: DataPattern::Counter },
            consumer: ConsumerModel::Unlimited,
            commands: Vec::new(),
            command_stream: None,
            time_limit: 1 << 40,
            trace: false,
        }
    }
}

impl Scenario {
    /// One sender per MAC `local(i + 1)`, all pointed at the receiver.
    pub fn with_senders(mut self, count: usize, template: SenderConfig) -> Self {
        self.senders = (0..count)
            .map(|i| SenderConfig {
                mac: crate::codec::MacAddress::local(i as u32 + 1),
                peer_mac: self.receiver.mac,
                ..template.clone()
            })
            .collect();
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::BadScenario(m));
        if self.senders.is_empty() {
            return bad("at least one sender is required".into());
        }
        if self.senders.len() > self.receiver.max_slaves {
            return bad(format!("{} senders exceed max_slaves {}", self.senders.len(), self.receiver.max_slaves));
        }
        self.channel.validate().map_err(SimError::BadScenario)?;
        for (i, s) in self.senders.iter().enumerate() {
            if s.peer_mac != self.receiver.mac {
                return bad(format!("sender {i}: peer_mac {} is not the receiver {}", s.peer_mac, self.receiver.mac));
            }
            if s.mac == self.receiver.mac || self.senders[..i].iter().any(|o| o.mac == s.mac) {
                return bad(format!("sender {i}: mac {} is not unique", s.mac));
            }
        }
        if let ConsumerModel::Limited { rate, period } = self.consumer {
            if !(rate > 0.0 && rate <= 1.0) || period == 0 {
                return bad(format!("consumer rate must be in (0, 1] with a positive period, got {rate} / {period}"));
            }
        }
        let user = |code: u16| is_valid_command_code(code) && code >= CMD_USER_MIN;
        for c in &self.commands {
            if !user(c.code) {
                return bad(format!("command code {:#06x} is not a user command", c.code));
            }
            if c.link >= self.senders.len() {
                return bad(format!("command for link {} but only {} senders", c.link, self.senders.len()));
            }
        }
        if let Some(s) = &self.command_stream {
            if !user(s.code) {
                return bad(format!("command code {:#06x} is not a user command", s.code));
            }
        }
        Ok(())
    }
}

/// Kind of the event [`Simulation::step`] executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEventKind {
    DeliverFrame { link: usize, direction: Direction },
    Timer,
    ConsumerStep,
    SourceStep,
    CommandDue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Executed {
    pub time: u64,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, Copy)]
enum SimEvent {
    Deliver { link: usize, direction: Direction, id: u64 },
    Timer,
    ConsumerStep,
    SourceStep,
    CommandDue(usize),
}

struct Link {
    sender: SenderCore,
    slave: SlaveId,
    up: Channel,
    down: Channel,
    source: Source,
    consumer: Consumer,
    backlog: VecDeque<CommandSpec>,
    stream_issued: u64,
    stop_requested: bool,
    stop_done: bool,
    decode_errors: u64,
}

impl Link {
    fn stream_wants_more(&self, stream: Option<&CommandStream>) -> bool {
        match stream {
            None => false,
            Some(s) => match s.count {
                Some(n) => self.stream_issued < n,
                None => !self.source.is_exhausted(),
            },
        }
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub stats: ScenarioStats,
    pub trace: Vec<TraceRecord>,
}

/// Stepwise scenario runner.
pub struct Simulation {
    scenario: Scenario,
    now: u64,
    queue: EventQueue<SimEvent>,
    receiver: ReceiverCore,
    links: Vec<Link>,
    trace: Vec<TraceRecord>,
    source_wakes: BTreeSet<u64>,
    timer_wakes: BTreeSet<u64>,
    commands_not_due: usize,
    finished_at: Option<u64>,
    unrouted: u64,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let hooks = (0..scenario.senders.len()).map(|_| None).collect();
        Self::build(scenario, hooks)
    }

    /// Like [`Simulation::new`] with a custom command hook per sender.
    pub fn with_hooks(scenario: Scenario, hooks: Vec<CommandHook>) -> Result<Self, SimError> {
        if hooks.len() != scenario.senders.len() {
            return Err(SimError::BadScenario(format!("{} hooks for {} senders", hooks.len(), scenario.senders.len())));
        }
        Self::build(scenario, hooks.into_iter().map(Some).collect())
    }

    fn build(scenario: Scenario, hooks: Vec<Option<CommandHook>>) -> Result<Self, SimError> {
        scenario.validate()?;
        let mut receiver = ReceiverCore::new(scenario.receiver.clone()).map_err(|e| SimError::BadScenario(e.to_string()))?;
        let mut links = Vec::with_capacity(scenario.senders.len());
        for (i, (cfg, hook)) in scenario.senders.iter().zip(hooks).enumerate() {
            let sender = match hook {
                Some(h) => SenderCore::with_hook(cfg.clone(), h),
                None => SenderCore::new(cfg.clone()),
            }
            .map_err(|e| SimError::BadScenario(e.to_string()))?;
            let slave = receiver.open_slave(cfg.mac, i as u32).map_err(|e| SimError::BadScenario(e.to_string()))?;
            receiver.start(slave).map_err(|e| SimError::BadScenario(e.to_string()))?;
            links.push(Link {
                sender,
                slave,
                up: Channel::new(&scenario.channel, Direction::Up, 2 * i as u64),
                down: Channel::new(&scenario.channel, Direction::Down, 2 * i as u64 + 1),
                source: Source::new(&scenario.source, i),
                consumer: Consumer::new(scenario.source.pattern, i),
                backlog: VecDeque::new(),
                stream_issued: 0,
                stop_requested: false,
                stop_done: false,
                decode_errors: 0,
            });
        }
        let mut queue = EventQueue::new();
        for (i, c) in scenario.commands.iter().enumerate() {
            queue.push(c.at_time, SimEvent::CommandDue(i));
        }
        if let ConsumerModel::Limited { period, .. } = scenario.consumer {
            queue.push(period, SimEvent::ConsumerStep);
        }
        let mut sim = Simulation {
            commands_not_due: scenario.commands.len(),
            scenario,
            now: 0,
            queue,
            receiver,
            links,
            trace: Vec::new(),
            source_wakes: BTreeSet::new(),
            timer_wakes: BTreeSet::new(),
            finished_at: None,
            unrouted: 0,
        };
        sim.pump();
        Ok(sim)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn receiver(&self) -> &ReceiverCore {
        &self.receiver
    }

    pub fn sender(&self, link: usize) -> &SenderCore {
        &self.links[link].sender
    }

    pub fn slave_id(&self, link: usize) -> SlaveId {
        self.links[link].slave
    }

    pub fn channel(&self, link: usize, direction: Direction) -> &Channel {
        match direction {
            Direction::Up => &self.links[link].up,
            Direction::Down => &self.links[link].down,
        }
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// Time at which the stop condition first held.
    pub fn finished_at(&self) -> Option<u64> {
        self.finished_at
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Executes the earliest pending event, if any.
    pub fn step(&mut self) -> Option<Executed> {
        let (time, event) = self.queue.pop()?;
        debug_assert!(time >= self.now, "event queue went back in time");
        self.now = time;
        let kind = match event {
            SimEvent::Deliver { link, direction, id } => {
                self.deliver(link, direction, id);
                SimEventKind::DeliverFrame { link, direction }
            }
            SimEvent::Timer => {
                self.timer_wakes.remove(&time);
                SimEventKind::Timer
            }
            SimEvent::SourceStep => {
                self.source_wakes.remove(&time);
                SimEventKind::SourceStep
            }
            SimEvent::ConsumerStep => {
                self.consumer_step();
                SimEventKind::ConsumerStep
            }
            SimEvent::CommandDue(i) => {
                let c = self.scenario.commands[i];
                self.links[c.link].backlog.push_back(c);
                self.commands_not_due -= 1;
                SimEventKind::CommandDue
            }
        };
        self.pump();
        Some(Executed { time, kind })
    }

    /// Steps until the stop condition holds or the time limit is reached.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.finished_at.is_none() {
            match self.queue.peek_time() {
                None => return Err(SimError::ScenarioDeadlock { time: self.now }),
                Some(t) if t > self.scenario.time_limit => break,
                Some(_) => {
                    self.step();
                }
            }
        }
        Ok(())
    }

    fn record(&mut self, link: usize, direction: Direction, frame: FrameInfo, action: &'static str) {
        if self.scenario.trace {
            self.trace.push(TraceRecord { time: self.now, link, direction, frame, action });
        }
    }

    fn transmit(&mut self, link: usize, direction: Direction, info: FrameInfo, bytes: Vec<u8>, action: &'static str) {
        self.record(link, direction, info, action);
        let l = &mut self.links[link];
        let ch = match direction {
            Direction::Up => &mut l.up,
            Direction::Down => &mut l.down,
        };
        match ch.send(info, bytes, self.now) {
            SendOutcome::Dropped => self.record(link, direction, info, "dropped"),
            SendOutcome::Scheduled { id, at, .. } => self.queue.push(at, SimEvent::Deliver { link, direction, id }),
        }
    }

    fn deliver(&mut self, link: usize, direction: Direction, id: u64) {
        let l = &mut self.links[link];
        let ch = match direction {
            Direction::Up => &mut l.up,
            Direction::Down => &mut l.down,
        };
        let Some((info, bytes)) = ch.deliver(id) else { return };
        self.record(link, direction, info, "delivered");
        match direction {
            Direction::Up => {
                let events = self.receiver.handle_frame(&bytes, self.now);
                self.handle_events(events);
            }
            Direction::Down => {
                let l = &mut self.links[link];
                match decode_frame(&bytes) {
                    // Protocol errors are counted inside the sender.
                    Ok(frame) => {
                        let _ = l.sender.handle_frame(&frame);
                    }
                    Err(_) => l.decode_errors += 1,
                }
            }
        }
    }

    fn link_of(&self, slave: SlaveId) -> Option<usize> {
        self.links.iter().position(|l| l.slave == slave)
    }

    fn handle_events(&mut self, events: Vec<ConsumerEvent>) {
        for e in events {
            let Some(i) = self.link_of(e.slave) else { continue };
            if let EventKind::CommandComplete { code: CMD_STOP, .. } = e.kind {
                self.links[i].stop_done = true;
            }
        }
    }

    fn consume(&mut self, link: usize, budget: u64) -> bool {
        let slave = self.links[link].slave;
        let Ok(available) = self.receiver.read_pointers(slave).map(|p| p.available) else { return false };
        let n = available.min(budget) / 8 * 8;
        if n == 0 {
            return false;
        }
        let mut buf = vec![0u8; n as usize];
        let got = self.receiver.peek(slave, &mut buf).expect("slave is associated");
        debug_assert_eq!(got as u64, n);
        self.links[link].consumer.verify(&buf);
        self.receiver.consume(slave, n).expect("within available");
        true
    }

    fn consumer_step(&mut self) {
        let ConsumerModel::Limited { rate, period } = self.scenario.consumer else { return };
        let per_step = (rate * period as f64).round() as u64;
        for i in 0..self.links.len() {
            let credit = self.links[i].consumer.credit + per_step;
            let before = self.receiver.slave(self.links[i].slave).map(|s| s.buffer.consumed_total()).unwrap_or(0);
            self.consume(i, credit);
            let after = self.receiver.slave(self.links[i].slave).map(|s| s.buffer.consumed_total()).unwrap_or(0);
            // Unused credit is lost, apart from a sub-word remainder.
            self.links[i].consumer.credit = (credit - (after - before)).min(7);
        }
        if self.finished_at.is_none() {
            self.queue.push(self.now + period, SimEvent::ConsumerStep);
        }
    }

    fn feed_source(&mut self, link: usize) -> bool {
        let l = &mut self.links[link];
        let mut progress = false;
        while l.sender.is_ready() {
            let words = l.source.pending();
            if words.is_empty() {
                break;
            }
            let taken = l.sender.offer_words(words).unwrap_or(0);
            if taken == 0 {
                break;
            }
            l.source.take(taken);
            progress = true;
        }
        progress
    }

    fn issue_commands(&mut self, link: usize) -> bool {
        let stream = self.scenario.command_stream;
        let l = &mut self.links[link];
        let busy = self.receiver.slave(l.slave).map_or(true, |s| s.has_pending_command());
        if busy {
            return false;
        }
        if l.source.is_exhausted() && !l.stop_requested {
            l.stop_requested = self.receiver.stop(l.slave).is_ok();
            return l.stop_requested;
        }
        if let Some(c) = l.backlog.pop_front() {
            return self.receiver.send_user_command(l.slave, c.code, c.argument, c.retries, c.timeout).is_ok();
        }
        if let Some(s) = stream.as_ref().filter(|_| l.stream_wants_more(stream.as_ref())) {
            let argument = l.stream_issued as u32;
            l.stream_issued += 1;
            return self.receiver.send_user_command(l.slave, s.code, argument, s.retries, s.timeout).is_ok();
        }
        false
    }

    fn pump(&mut self) {
        let now = self.now;
        loop {
            let mut progress = false;
            let events = self.receiver.poll_timers(now);
            self.handle_events(events);
            for i in 0..self.links.len() {
                progress |= self.feed_source(i);
                progress |= self.issue_commands(i);
                if self.links[i].up.is_idle(now) {
                    if let Some(em) = self.links[i].sender.poll_output(now) {
                        let info = FrameInfo::of(&em.payload);
                        self.transmit(i, Direction::Up, info, em.encode(), em.kind.as_str());
                        progress = true;
                    }
                }
                if self.links[i].down.is_idle(now) {
                    if let Some(f) = self.receiver.poll_outgoing(self.links[i].slave, now) {
                        let info = FrameInfo::of(&f.payload);
                        let action = match info.kind {
                            "ack" | "nack" if f.reack => "reack",
                            "ack" | "nack" => "ack",
                            _ => "sent",
                        };
                        self.transmit(i, Direction::Down, info, f.encode(), action);
                        progress = true;
                    }
                }
                if self.scenario.consumer == ConsumerModel::Unlimited {
                    progress |= self.consume(i, u64::MAX);
                }
            }
            while let Some((mac, f)) = self.receiver.poll_unsolicited() {
                match self.links.iter().position(|l| l.sender.config().mac == mac) {
                    Some(i) => {
                        let info = FrameInfo::of(&f.payload);
                        self.transmit(i, Direction::Down, info, f.encode(), "sent");
                    }
                    None => self.unrouted += 1,
                }
            }
            if !progress {
                break;
            }
        }
        if self.finished_at.is_none() && self.stop_condition() {
            self.finished_at = Some(now);
        }
        self.schedule_wakes();
    }

    fn stop_condition(&self) -> bool {
        self.commands_not_due == 0
            && self.links.iter().all(|l| {
                let Ok(s) = self.receiver.slave(l.slave) else { return false };
                l.stop_done
                    && s.end_of_transmission
                    && s.buffer.available() == 0
                    && !s.has_pending_command()
                    && l.sender.is_drained()
                    && l.backlog.is_empty()
                    && !l.stream_wants_more(self.scenario.command_stream.as_ref())
            })
    }

    fn schedule_wakes(&mut self) {
        let now = self.now;
        for i in 0..self.links.len() {
            let l = &self.links[i];
            let mut wake = l.sender.next_wakeup(now).map(|w| w.max(l.up.busy_until()));
            if self.receiver.has_outgoing(l.slave) {
                let t = l.down.busy_until();
                wake = Some(wake.map_or(t, |w| w.min(t)));
            }
            if let Some(t) = wake.filter(|&t| t > now) {
                if self.source_wakes.insert(t) {
                    self.queue.push(t, SimEvent::SourceStep);
                }
            }
        }
        if let Some(d) = self.receiver.next_deadline().filter(|&d| d > now) {
            if self.timer_wakes.insert(d) {
                self.queue.push(d, SimEvent::Timer);
            }
        }
    }

    /// Collects counters from every component.
    pub fn stats(&self) -> ScenarioStats {
        let mut s = ScenarioStats { links: self.links.len() as u64, completed: self.finished_at.is_some(), ..Default::default() };
        for l in &self.links {
            let c = l.sender.counters();
            s.data_frames_sent += c.data_frames_sent;
            s.retransmissions += c.retransmissions;
            s.early_retransmissions += c.early_retransmissions;
            s.spurious_retransmissions += c.spurious_retransmissions;
            s.commands_executed += c.commands_executed;
            s.protocol_errors += c.protocol_errors;
            s.final_delay = s.final_delay.max(l.sender.current_delay());
            s.max_delay = s
                .max_delay
                .max(l.sender.current_delay())
                .max(l.sender.adapt_history().iter().map(|r| r.delay).max().unwrap_or(0));
            if let Ok(slave) = self.receiver.slave(l.slave) {
                let r = slave.counters;
                s.acks_sent += r.acks_sent;
                s.reacks += r.reacks;
                s.protocol_errors += r.protocol_errors;
                s.command_retries += r.command_retries;
                s.command_timeouts += r.command_timeouts;
                s.commands_completed += r.commands_completed;
                s.bytes_delivered_to_consumer += r.bytes_consumed;
                s.end_of_transmission_events += r.end_of_transmission_events;
            }
            let (up, down) = (l.up.counters(), l.down.counters());
            s.frames_sent_up += up.sent;
            s.frames_dropped_up += up.dropped;
            s.frames_delivered_up += up.delivered;
            s.frames_sent_down += down.sent;
            s.frames_dropped_down += down.dropped;
            s.frames_delivered_down += down.delivered;
            s.channel_data_frames_up += up.data_frames_sent;
            s.words_verified += l.consumer.words_checked;
            s.integrity_errors += l.consumer.mismatches;
            let expected = self.scenario.source.total_words;
            if l.source.is_exhausted() && l.consumer.words_checked != expected && s.completed {
                s.integrity_errors += expected.abs_diff(l.consumer.words_checked);
            }
        }
        s.simulated_duration = self.finished_at.unwrap_or(self.now);
        s.simulated_seconds = self.scenario.channel.seconds(s.simulated_duration);
        s.goodput_fraction = goodput_fraction(&s, &self.scenario.channel);
        s.command_rate = command_rate(&s);
        s
    }

    /// Frames received by senders that failed to decode, plus unroutable
    /// receiver frames.
    pub fn undeliverable_frames(&self) -> u64 {
        self.links.iter().map(|l| l.decode_errors).sum::<u64>() + self.unrouted
    }

    pub fn into_report(self) -> ScenarioReport {
        ScenarioReport { stats: self.stats(), trace: self.trace }
    }
}

/// Runs a scenario to completion or its time limit.
pub fn run_scenario(scenario: Scenario) -> Result<ScenarioReport, SimError> {
    let mut sim = Simulation::new(scenario)?;
    sim.run_to_end()?;
    Ok(sim.into_report())
}
