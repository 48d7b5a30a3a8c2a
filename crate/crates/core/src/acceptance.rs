//! Built-in acceptance scenarios.
//!
//! Each check runs one or more scenarios, compares the outcome against an
//! independently computed expectation and returns a [`CheckOutcome`]. The
//! same checks back the `selftest` command and the `acceptance` test target.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netsim::{
    render_trace, run_scenario, CommandStream, ConsumerModel, DataPattern, Direction, ScenarioReport, Scenario,
    ScriptedLoss, Simulation, SourceModel, TraceRecord,
};
use crate::sender::{CommandHook, DelayTuning, EarlyRetransmit, SenderConfig};
use crate::serial::{packet_newer, seq_newer, serial_cmp, FrameSeq, PacketNumber};

pub const FIG4A_GOLDEN: &str = include_str!("../golden/fig4a.trace");
pub const FIG4B_GOLDEN: &str = include_str!("../golden/fig4b.trace");

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub number: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Stats JSON of every scenario the check ran, for the determinism check.
    pub fingerprint: String,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!("{} criterion {}: {} ({})", if self.passed { "PASS" } else { "FAIL" }, self.number, self.title, self.detail)
    }
}

const STREAM_PACKETS: u64 = 10_000;
const USER_CODE: u16 = 0x0100;

fn counter_stream(packets: u64) -> SourceModel {
    SourceModel::packets(packets, DataPattern::Counter)
}

/// Scripted run reproducing the early-retransmission figure: the first copy
/// of packet 2 and the ack of packet 4 are lost. Latency puts an ack about
/// 2.4 frame times behind its data frame.
pub fn fig4_scenario(mode: EarlyRetransmit) -> Scenario {
    let mut sc = Scenario::default().with_senders(1, SenderConfig { early_retransmit: mode, ..Default::default() });
    sc.source = SourceModel { total_words: 5 * 1024 + 512, pattern: DataPattern::Counter };
    sc.channel.latency = 10_000;
    sc.channel.scripted_losses = vec![
        ScriptedLoss::Match { direction: Direction::Up, frame: "data".into(), packet: 2, nth: 0 },
        ScriptedLoss::Match { direction: Direction::Down, frame: "ack".into(), packet: 4, nth: 0 },
    ];
    sc.trace = true;
    sc
}

/// Data emissions and losses, and ack arrivals at the sender.
pub fn emission_schedule(trace: &[TraceRecord]) -> Vec<&TraceRecord> {
    trace
        .iter()
        .filter(|r| match r.direction {
            Direction::Up => r.frame.is_data() && r.action != "delivered",
            Direction::Down => r.frame.kind == "ack" && matches!(r.action, "delivered" | "dropped"),
        })
        .collect()
}

fn data_emissions(trace: &[TraceRecord], pkt: u32) -> Vec<&TraceRecord> {
    trace
        .iter()
        .filter(|r| {
            r.direction == Direction::Up
                && r.frame.is_data()
                && r.frame.packet == Some(pkt)
                && matches!(r.action, "sent" | "retransmit" | "early_retransmit")
        })
        .collect()
}

/// Time the ack for `pkt` reached the sender.
fn ack_arrival(trace: &[TraceRecord], pkt: u32) -> Option<u64> {
    trace
        .iter()
        .find(|r| r.direction == Direction::Down && r.frame.kind == "ack" && r.frame.packet == Some(pkt) && r.action == "delivered")
        .map(|r| r.time)
}

fn run(sc: Scenario) -> Result<ScenarioReport, String> {
    run_scenario(sc).map_err(|e| e.to_string())
}

fn fail(number: u8, title: &'static str, detail: String) -> CheckOutcome {
    CheckOutcome { number, title, passed: false, detail, fingerprint: String::new() }
}

/// Reliable delivery of a counter stream at several loss rates.
pub fn check_reliability() -> CheckOutcome {
    const TITLE: &str = "reliability under loss";
    let mut fingerprint = String::new();
    let mut details = Vec::new();
    let mut passed = true;
    for loss in [0.0, 0.01, 0.05, 0.10] {
        let mut sc = Scenario::default();
        sc.source = counter_stream(STREAM_PACKETS);
        sc.channel = sc.channel.with_loss(loss);
        let r = match run(sc) {
            Ok(r) => r,
            Err(e) => return fail(1, TITLE, format!("loss {loss}: {e}")),
        };
        let s = &r.stats;
        let ok = s.completed
            && s.integrity_errors == 0
            && s.words_verified == STREAM_PACKETS * 1024
            && s.bytes_delivered_to_consumer == STREAM_PACKETS * 8192
            && s.end_of_transmission_events == 1
            && s.protocol_errors == 0
            && (loss == 0.0 || s.retransmissions > 0);
        passed &= ok;
        details.push(format!("p={loss}: retx={} eot={}", s.retransmissions, s.end_of_transmission_events));
        fingerprint.push_str(&s.to_json());
    }
    CheckOutcome { number: 1, title: TITLE, passed, detail: details.join(", "), fingerprint }
}

/// The scripted loss pattern with and without sequence-number suppression.
pub fn check_fig4() -> CheckOutcome {
    const TITLE: &str = "early retransmission schedule";
    let (b, a) = match (run(fig4_scenario(EarlyRetransmit::SequenceNumbers)), run(fig4_scenario(EarlyRetransmit::PacketNumbers))) {
        (Ok(b), Ok(a)) => (b, a),
        (Err(e), _) | (_, Err(e)) => return fail(2, TITLE, e),
    };
    let mut problems = Vec::new();

    let b2 = data_emissions(&b.trace, 2);
    let b4 = data_emissions(&b.trace, 4);
    if b2.len() != 2 || b2[1].action != "early_retransmit" || Some(b2[1].time) != ack_arrival(&b.trace, 3) {
        problems.push("with seq: packet 2 not early-retransmitted exactly once on ack(3)".to_string());
    }
    if b4.len() != 2 || b4[1].action != "early_retransmit" || Some(b4[1].time) != ack_arrival(&b.trace, 5) {
        problems.push("with seq: packet 4 not early-retransmitted exactly once on ack(5)".to_string());
    }
    if b.stats.spurious_retransmissions != 0 {
        problems.push(format!("with seq: {} spurious retransmissions", b.stats.spurious_retransmissions));
    }
    let a2 = data_emissions(&a.trace, 2);
    let a4 = data_emissions(&a.trace, 4);
    if a2.len() != 3 || a4.len() != 2 || a.stats.spurious_retransmissions == 0 {
        problems.push(format!("without seq: packet 2 sent {} times, packet 4 sent {} times", a2.len(), a4.len()));
    }
    for (name, report, golden) in [("fig4b", &b, FIG4B_GOLDEN), ("fig4a", &a, FIG4A_GOLDEN)] {
        if render_trace(&report.trace) != golden {
            problems.push(format!("{name} trace differs from golden file"));
        }
    }
    let passed = problems.is_empty();
    let detail = if passed {
        format!("packet 2 retransmitted {}x with seq, {}x without", b2.len() - 1, a2.len() - 1)
    } else {
        problems.join("; ")
    };
    CheckOutcome { number: 2, title: TITLE, passed, detail, fingerprint: b.stats.to_json() + &a.stats.to_json() }
}

/// Lossless saturated goodput against the frame-size bound.
pub fn check_efficiency() -> CheckOutcome {
    const TITLE: &str = "lossless efficiency bound";
    let mut fingerprint = String::new();
    let mut details = Vec::new();
    let mut passed = true;
    // 8192 payload bytes per 8236-byte frame plus preamble and gap.
    for (overhead, expected) in [(20u64, 8192.0 / 8256.0), (0, 8192.0 / 8236.0)] {
        let mut sc = Scenario::default();
        sc.source = counter_stream(STREAM_PACKETS);
        sc.channel.framing_overhead = overhead;
        let r = match run(sc) {
            Ok(r) => r,
            Err(e) => return fail(3, TITLE, e),
        };
        let g = r.stats.goodput_fraction;
        passed &= r.stats.completed && r.stats.retransmissions == 0 && (g - expected).abs() <= 0.002;
        details.push(format!("overhead {overhead}: {g:.5} vs {expected:.5}"));
        fingerprint.push_str(&r.stats.to_json());
    }
    CheckOutcome { number: 3, title: TITLE, passed, detail: details.join(", "), fingerprint }
}

/// Hook that counts its invocations.
pub fn counting_hook(counter: Arc<AtomicU64>) -> CommandHook {
    Box::new(move |code, arg| {
        counter.fetch_add(1, AtomicOrdering::SeqCst);
        let mut v = [0u8; 8];
        v[..2].copy_from_slice(&code.to_be_bytes());
        v[4..].copy_from_slice(&arg.to_be_bytes());
        v
    })
}

/// 1000 commands over a lossy link run exactly once each.
pub fn check_exactly_once() -> CheckOutcome {
    const TITLE: &str = "exactly-once commands under loss";
    let mut sc = Scenario::default();
    sc.channel = sc.channel.with_loss(0.10);
    sc.command_stream = Some(CommandStream { code: USER_CODE, retries: 5, timeout: 100_000, count: Some(1000) });
    let executions = Arc::new(AtomicU64::new(0));
    let mut sim = match Simulation::with_hooks(sc, vec![counting_hook(executions.clone())]) {
        Ok(s) => s,
        Err(e) => return fail(4, TITLE, e.to_string()),
    };
    if let Err(e) = sim.run_to_end() {
        return fail(4, TITLE, e.to_string());
    }
    let s = sim.stats();
    let hook = executions.load(AtomicOrdering::SeqCst);
    let passed = s.completed && s.command_timeouts == 0 && hook == 1000 && s.commands_executed == 1000;
    let detail = format!("hook ran {hook}x, timeouts={}, retries={}", s.command_timeouts, s.command_retries);
    CheckOutcome { number: 4, title: TITLE, passed, detail, fingerprint: s.to_json() }
}

/// Goodput with a back-to-back command stream against a command-free run.
pub fn check_coexistence() -> CheckOutcome {
    const TITLE: &str = "commands do not slow the data stream";
    let mut base = Scenario::default();
    base.source = counter_stream(STREAM_PACKETS);
    let mut loaded = base.clone();
    loaded.command_stream = Some(CommandStream { code: USER_CODE, retries: 5, timeout: 100_000, count: None });
    let (r0, r1) = match (run(base), run(loaded)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(5, TITLE, e),
    };
    let (g0, g1) = (r0.stats.goodput_fraction, r1.stats.goodput_fraction);
    let change = (g1 - g0).abs() / g0;
    let rate = r1.stats.command_rate.unwrap_or(0.0);
    let passed = r1.stats.completed && r1.stats.integrity_errors == 0 && r1.stats.commands_executed > 0 && change < 0.01;
    let detail = format!("{} commands ({rate:.0}/s), goodput {g0:.5} -> {g1:.5}", r1.stats.commands_executed);
    CheckOutcome { number: 5, title: TITLE, passed, detail, fingerprint: r0.stats.to_json() + &r1.stats.to_json() }
}

/// Scenario with a consumer draining at half the line rate.
pub fn congestion_scenario() -> Scenario {
    let tuning = DelayTuning { adapt_window: 64, delay_step: 2048, ..Default::default() };
    let mut sc = Scenario::default().with_senders(1, SenderConfig { delay: tuning, ..Default::default() });
    sc.receiver.n_cpu = 8;
    sc.source = counter_stream(STREAM_PACKETS);
    sc.consumer = ConsumerModel::Limited { rate: 0.5, period: 1024 };
    sc
}

/// The delay adapter backs off when the consumer is the bottleneck.
pub fn check_congestion() -> CheckOutcome {
    const TITLE: &str = "delay back-off with a slow consumer";
    let mut sim = match Simulation::new(congestion_scenario()) {
        Ok(s) => s,
        Err(e) => return fail(6, TITLE, e.to_string()),
    };
    if let Err(e) = sim.run_to_end() {
        return fail(6, TITLE, e.to_string());
    }
    let hi = sim.sender(0).config().delay.hi_threshold;
    let history = sim.sender(0).adapt_history();
    // A window that raised the delay, followed later by a window under the threshold.
    let first_raise = history.windows(2).position(|w| w[1].delay > w[0].delay).map(|i| i + 1);
    let settled = first_raise.and_then(|i| history[i + 1..].iter().position(|r| r.ratio < hi));
    let s = sim.stats();
    let passed = first_raise.is_some()
        && settled.is_some()
        && s.completed
        && s.integrity_errors == 0
        && s.bytes_delivered_to_consumer == STREAM_PACKETS * 8192;
    let detail = format!(
        "max delay {}, {} windows, goodput {:.3}, first raise at window {:?}",
        s.max_delay,
        history.len(),
        s.goodput_fraction,
        first_raise
    );
    CheckOutcome { number: 6, title: TITLE, passed, detail, fingerprint: s.to_json() }
}

/// The footnote rule at modulus 2^8, in signed arithmetic.
fn footnote_rule(a: i64, b: i64) -> Ordering {
    let d = (a - b).rem_euclid(256);
    if d == 0 {
        Ordering::Equal
    } else if d <= 128 {
        Ordering::Greater
    } else {
        Ordering::Less
    }
}

/// Wrapping comparators against the brute-force rule on every 8-bit pair.
pub fn check_comparators() -> CheckOutcome {
    const TITLE: &str = "wrapping comparators";
    let mut mismatches = 0u32;
    let mut pairs = 0u32;
    for a in 0..256u32 {
        for b in 0..256u32 {
            pairs += 1;
            let want = footnote_rule(a as i64, b as i64);
            let direct = serial_cmp(a as u64, b as u64, 8);
            let pkt = packet_newer(PacketNumber(a << 24), PacketNumber(b << 24));
            let seq = seq_newer(FrameSeq((a << 8) as u16), FrameSeq((b << 8) as u16));
            if direct != want || pkt != want || seq != want {
                mismatches += 1;
            }
        }
    }
    CheckOutcome {
        number: 7,
        title: TITLE,
        passed: mismatches == 0 && pairs == 65_536,
        detail: format!("{pairs} pairs, {mismatches} mismatches"),
        fingerprint: format!("{pairs}/{mismatches}"),
    }
}

/// Random lossy, reordering schedule with small windows.
pub fn random_window_scenario(rng: &mut ChaCha8Rng, n_fpga: u32, n_cpu: u32) -> Scenario {
    let sender = SenderConfig {
        n_fpga,
        retransmit_holdoff: [0, 20_000, 65_536][rng.gen_range(0..3)],
        ..Default::default()
    };
    let mut sc = Scenario::default().with_senders(1, sender);
    sc.receiver.n_cpu = n_cpu;
    sc.channel.loss_up = rng.gen_range(0.0..0.3);
    sc.channel.loss_down = rng.gen_range(0.0..0.3);
    sc.channel.reorder_probability = rng.gen_range(0.0..0.3);
    sc.channel.latency = rng.gen_range(0..20_000);
    sc.channel.jitter = rng.gen_range(0..20_000);
    sc.channel.seed = rng.gen();
    sc.source = SourceModel { total_words: rng.gen_range(0..24 * 1024), pattern: DataPattern::Counter };
    if rng.gen_bool(0.3) {
        sc.consumer = ConsumerModel::Limited { rate: rng.gen_range(0.2..1.0), period: 1024 };
    }
    sc.time_limit = 1 << 34;
    sc
}

/// Steps a scenario, checking both windows after every event.
pub fn check_window_invariants(sc: Scenario) -> Result<String, String> {
    let n_fpga = sc.senders[0].n_fpga;
    let n_cpu = sc.receiver.n_cpu;
    let mut sim = Simulation::new(sc).map_err(|e| e.to_string())?;
    let slave = sim.slave_id(0);
    let mut steps = 0u64;
    loop {
        let held = sim.sender(0).ring().occupied() as u64;
        if held > 1u64 << n_fpga {
            return Err(format!("sender holds {held} packets with n_fpga={n_fpga} at t={}", sim.now()));
        }
        let buf = &sim.receiver().slave(slave).map_err(|e| e.to_string())?.buffer;
        let base = buf.tail_packet_abs();
        if let Some((abs, pkt)) = buf.stored_packets().into_iter().find(|&(abs, _)| abs < base || abs >= base + (1u64 << n_cpu)) {
            return Err(format!("receiver stored packet {pkt} at index {abs} outside [{base}, +2^{n_cpu})"));
        }
        if sim.finished_at().is_some() {
            break;
        }
        if sim.step().is_none() {
            return Err(format!("deadlock at t={}", sim.now()));
        }
        steps += 1;
        if sim.now() > sim.scenario().time_limit {
            return Err(format!("not finished by t={}", sim.now()));
        }
    }
    let s = sim.stats();
    if s.integrity_errors != 0 {
        return Err(format!("{} corrupt words", s.integrity_errors));
    }
    Ok(format!("{steps}:{}", s.to_json()))
}

/// Window bounds over many random schedules, plus the largest window sizes once.
pub fn check_window_safety() -> CheckOutcome {
    const TITLE: &str = "window safety";
    const SIZES: [u32; 3] = [2, 4, 6];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5AFE);
    let mut fingerprint = String::new();
    for i in 0..1000 {
        let n_fpga = SIZES[rng.gen_range(0..3)];
        let n_cpu = SIZES[rng.gen_range(0..3)];
        let sc = random_window_scenario(&mut rng, n_fpga, n_cpu);
        match check_window_invariants(sc) {
            Ok(fp) => fingerprint.push_str(&fp),
            Err(e) => return fail(8, TITLE, format!("schedule {i} (n_fpga={n_fpga}, n_cpu={n_cpu}): {e}")),
        }
    }
    for (n_fpga, n_cpu) in [(16, 16), (16, 32), (32, 32)] {
        let mut sc = Scenario::default().with_senders(1, SenderConfig { n_fpga, ..Default::default() });
        sc.receiver.n_cpu = n_cpu;
        sc.source = counter_stream(64);
        sc.channel = sc.channel.with_loss(0.05);
        if let Err(e) = check_window_invariants(sc) {
            return fail(8, TITLE, format!("n_fpga={n_fpga}, n_cpu={n_cpu}: {e}"));
        }
    }
    CheckOutcome { number: 8, title: TITLE, passed: true, detail: "1000 random schedules and 3 large-window runs".into(), fingerprint }
}

pub type Check = fn() -> CheckOutcome;

pub const CHECKS: [Check; 8] = [
    check_reliability,
    check_fig4,
    check_efficiency,
    check_exactly_once,
    check_coexistence,
    check_congestion,
    check_comparators,
    check_window_safety,
];

/// Re-runs checks and compares their stats output with the first run.
pub fn check_determinism(first: &[CheckOutcome]) -> CheckOutcome {
    const TITLE: &str = "determinism";
    let differing: Vec<u8> = CHECKS
        .iter()
        .zip(first)
        .filter(|(check, earlier)| check().fingerprint != earlier.fingerprint)
        .map(|(_, earlier)| earlier.number)
        .collect();
    let passed = differing.is_empty() && first.len() == CHECKS.len();
    let detail = if passed { format!("{} checks repeat identically", first.len()) } else { format!("differing: {differing:?}") };
    CheckOutcome { number: 9, title: TITLE, passed, detail, fingerprint: String::new() }
}

/// Runs every check, then the determinism re-run.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = CHECKS.iter().map(|c| c()).collect();
    out.push(check_determinism(&out));
    out
}
