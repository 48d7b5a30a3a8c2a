use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use fade10g::codec::{CommandResponseField, Payload};
use fade10g::profile::{CMD_RESET, CMD_START, CMD_STOP, CMD_USER_MIN};
use fade10g::sender::{EarlyRetransmit, EmissionKind, SenderConfig, SenderCore, SenderError};
use fade10g::serial::{CommandSeq, FrameSeq, PacketNumber};
use proptest::prelude::*;

const FAR: u64 = 1 << 40;

fn config(n_fpga: u32, mode: EarlyRetransmit) -> SenderConfig {
    SenderConfig { n_fpga, early_retransmit: mode, retransmit_holdoff: FAR, ..Default::default() }
}

fn started(cfg: SenderConfig) -> SenderCore {
    let mut s = SenderCore::new(cfg).unwrap();
    s.handle_command(CMD_START, CommandSeq(1), 0);
    // Drop the START response so it does not show up as output.
    s.poll_output(0);
    s
}

fn packets(n: usize) -> Vec<u64> {
    (0..n as u64 * 1024).collect()
}

fn ack(s: &mut SenderCore, seq: u16, pkt: u32) {
    s.handle_ack(FrameSeq(seq), PacketNumber(pkt), 0).unwrap();
}

/// (packet, seq, kind) of one emission.
fn emit(s: &mut SenderCore, now: u64) -> Option<(u32, u16, EmissionKind)> {
    let e = s.poll_output(now)?;
    let (seq, pkt) = e.payload.data_ids()?;
    Some((pkt.0, seq.0, e.kind))
}

#[test]
fn ring_size_follows_n_fpga() {
    let s = SenderCore::new(config(4, EarlyRetransmit::SequenceNumbers)).unwrap();
    assert_eq!(s.ring().capacity(), 16);
    assert!((0..16).map(|i| s.ring().descriptor(i)).all(|d| !d.valid && !d.sent && !d.confirmed));
    assert!(matches!(SenderCore::new(config(0, EarlyRetransmit::Disabled)), Err(SenderError::BadConfig(_))));
    assert!(matches!(SenderCore::new(config(33, EarlyRetransmit::Disabled)), Err(SenderError::BadConfig(_))));
    let big = SenderCore::new(config(32, EarlyRetransmit::Disabled)).unwrap();
    assert_eq!(big.ring().capacity(), 1 << 32);
}

#[test]
fn words_before_start_are_refused() {
    let mut s = SenderCore::new(SenderConfig::default()).unwrap();
    assert!(!s.is_ready());
    assert_eq!(s.offer_words(&[1, 2, 3]), Err(SenderError::NotStarted));
}

#[test]
fn one_packet_sets_valid_and_moves_head() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    assert_eq!(s.offer_words(&packets(1)).unwrap(), 1024);
    let d = s.ring().descriptor(0);
    assert!(d.valid && !d.sent && !d.confirmed);
    assert_eq!(s.ring().head(), 1);
    assert_eq!(s.partial_words(), 0);
}

#[test]
fn full_ring_takes_nothing() {
    let mut s = started(config(2, EarlyRetransmit::SequenceNumbers));
    assert_eq!(s.offer_words(&packets(5)).unwrap(), 4 * 1024);
    assert!(!s.is_ready());
    assert_eq!(s.offer_words(&[7]).unwrap(), 0);
}

/// Word-at-a-time model of the packing rule.
fn packing_oracle(capacity: usize, offers: &[usize]) -> (usize, usize, usize) {
    let (mut sealed, mut partial, mut accepted) = (0usize, 0usize, 0usize);
    for &n in offers {
        for _ in 0..n {
            if sealed == capacity {
                break;
            }
            partial += 1;
            accepted += 1;
            if partial == 1024 {
                sealed += 1;
                partial = 0;
            }
        }
    }
    (sealed, partial, accepted)
}

#[test]
fn partial_packet_after_1500_words() {
    let mut s = started(config(1, EarlyRetransmit::SequenceNumbers));
    assert_eq!(s.offer_words(&vec![9; 1500]).unwrap(), 1500);
    assert_eq!(s.ring().occupied(), 1);
    assert_eq!(s.partial_words(), 476);
    assert_eq!(packing_oracle(2, &[1500]), (1, 476, 1500));
}

#[test]
fn early_retransmission_with_sequence_numbers() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    s.offer_words(&packets(8)).unwrap();
    for i in 0..7u32 {
        assert_eq!(emit(&mut s, i as u64), Some((i, i as u16, EmissionKind::Fresh)));
    }
    ack(&mut s, 0, 0);
    ack(&mut s, 1, 1);
    ack(&mut s, 3, 3);
    assert_eq!(emit(&mut s, 10), Some((2, 7, EmissionKind::EarlyRetransmit)));
    assert_eq!(emit(&mut s, 11), Some((7, 8, EmissionKind::Fresh)));
    ack(&mut s, 5, 5);
    // Packet 2 went out again as seq 7, after the acked seq 5.
    assert_eq!(emit(&mut s, 12), Some((4, 9, EmissionKind::EarlyRetransmit)));
    assert_eq!(emit(&mut s, 13), None);
    assert_eq!(s.counters().spurious_retransmissions, 0);
}

#[test]
fn early_retransmission_with_packet_numbers_repeats_packet_2() {
    let mut s = started(config(4, EarlyRetransmit::PacketNumbers));
    s.offer_words(&packets(8)).unwrap();
    for i in 0..7u32 {
        emit(&mut s, i as u64).unwrap();
    }
    ack(&mut s, 0, 0);
    ack(&mut s, 1, 1);
    ack(&mut s, 3, 3);
    assert_eq!(emit(&mut s, 10), Some((2, 7, EmissionKind::EarlyRetransmit)));
    assert_eq!(emit(&mut s, 11), Some((7, 8, EmissionKind::Fresh)));
    ack(&mut s, 5, 5);
    let mut early: Vec<u32> = (12..14).filter_map(|t| emit(&mut s, t)).map(|(p, _, _)| p).collect();
    early.sort();
    assert_eq!(early, vec![2, 4]);
    assert_eq!(s.counters().spurious_retransmissions, 1);
}

#[test]
fn disabled_mode_never_retransmits_early() {
    let mut s = started(config(4, EarlyRetransmit::Disabled));
    s.offer_words(&packets(4)).unwrap();
    for i in 0..4 {
        emit(&mut s, i).unwrap();
    }
    ack(&mut s, 3, 3);
    assert_eq!(emit(&mut s, 10), None);
}

#[test]
fn ack_beyond_last_transmitted_is_a_protocol_error() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    s.offer_words(&packets(6)).unwrap();
    for i in 0..4 {
        emit(&mut s, i).unwrap();
    }
    let err = s.handle_ack(FrameSeq(9), PacketNumber(10), 0).unwrap_err();
    assert_eq!(err, SenderError::ProtocolError { packet: PacketNumber(10), last_transmitted: Some(PacketNumber(3)) });
    assert_eq!(s.counters().protocol_errors, 1);
    let mut fresh = started(config(4, EarlyRetransmit::SequenceNumbers));
    assert!(fresh.handle_ack(FrameSeq(0), PacketNumber(0), 0).is_err());
}

#[test]
fn acks_free_the_tail_in_order() {
    let mut s = started(config(2, EarlyRetransmit::Disabled));
    s.offer_words(&packets(4)).unwrap();
    for i in 0..4 {
        emit(&mut s, i).unwrap();
    }
    ack(&mut s, 1, 1);
    assert_eq!(s.ring().tail(), 0);
    assert!(!s.is_ready());
    ack(&mut s, 0, 0);
    assert_eq!(s.ring().tail(), 2);
    assert!(s.is_ready());
    // Acking a freed packet again changes nothing.
    ack(&mut s, 0, 0);
    assert_eq!(s.counters().stale_acks, 1);
    assert_eq!(s.ring().tail(), 2);
}

#[test]
fn nack_sends_the_named_packet_first() {
    let mut s = started(config(4, EarlyRetransmit::Disabled));
    s.offer_words(&packets(6)).unwrap();
    for i in 0..4 {
        emit(&mut s, i).unwrap();
    }
    s.handle_nack(FrameSeq(2), PacketNumber(2));
    assert_eq!(emit(&mut s, 10), Some((2, 4, EmissionKind::EarlyRetransmit)));
    assert_eq!(emit(&mut s, 11), Some((4, 5, EmissionKind::Fresh)));

    ack(&mut s, 0, 0);
    s.handle_nack(FrameSeq(0), PacketNumber(0));
    s.handle_nack(FrameSeq(0), PacketNumber(5));
    assert_eq!(emit(&mut s, 12), Some((5, 6, EmissionKind::Fresh)));
    assert_eq!(emit(&mut s, 13), None);
}

#[test]
fn stop_flushes_partial_packet() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    s.offer_words(&vec![3; 512]).unwrap();
    s.handle_command(CMD_STOP, CommandSeq(2), 0);
    let e = s.poll_output(0).unwrap();
    let Payload::LastData(last) = &e.payload else { panic!("expected last data, got {:?}", e.payload.kind_name()) };
    assert_eq!(last.valid_words, 512);
    assert_eq!(last.cmd_response.command_code, CMD_STOP);
    assert!(s.offer_words(&[1]).is_err());
}

#[test]
fn stop_on_packet_boundary_sends_empty_last_packet() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    s.offer_words(&packets(2)).unwrap();
    s.handle_command(CMD_STOP, CommandSeq(2), 0);
    let kinds: Vec<_> = (0..3).map(|t| s.poll_output(t).unwrap().payload).collect();
    assert!(matches!(kinds[0], Payload::Data(_)));
    assert!(matches!(kinds[1], Payload::Data(_)));
    let Payload::LastData(last) = &kinds[2] else { panic!("expected last data") };
    assert_eq!(last.valid_words, 0);
    assert_eq!(last.packet, PacketNumber(2));
}

fn counting_core(cfg: SenderConfig) -> (SenderCore, Arc<AtomicU64>) {
    let calls = Arc::new(AtomicU64::new(0));
    let c = calls.clone();
    let hook = Box::new(move |_code: u16, arg: u32| {
        c.fetch_add(1, Ordering::SeqCst);
        (arg as u64 * 3).to_be_bytes()
    });
    (SenderCore::with_hook(cfg, hook).unwrap(), calls)
}

fn lone_response(s: &mut SenderCore) -> CommandResponseField {
    match s.poll_output(0).map(|e| e.payload) {
        Some(Payload::CommandResponse(r)) => r,
        other => panic!("expected a response packet, got {other:?}"),
    }
}

#[test]
fn duplicate_command_runs_once_and_answers_twice() {
    let (mut s, calls) = counting_core(SenderConfig::default());
    s.handle_command(CMD_USER_MIN, CommandSeq(7), 5);
    let first = lone_response(&mut s);
    s.handle_command(CMD_USER_MIN, CommandSeq(7), 5);
    let second = lone_response(&mut s);
    assert_eq!(calls.load(Ordering::SeqCst), 1);
    assert_eq!(first, second);
    assert_eq!(first.return_value, 15u64.to_be_bytes());
    assert_eq!(s.counters().duplicate_commands, 1);
}

#[test]
fn response_rides_on_data_when_data_waits() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    s.offer_words(&packets(1)).unwrap();
    s.handle_command(CMD_USER_MIN, CommandSeq(2), 1);
    let e = s.poll_output(0).unwrap();
    let Payload::Data(d) = &e.payload else { panic!("expected data") };
    assert_eq!(d.cmd_response.csn, CommandSeq(2));
    assert_eq!(s.poll_output(1).map(|e| e.payload.kind_name()), None);
}

#[test]
fn reset_clears_everything_silently() {
    let mut s = started(config(4, EarlyRetransmit::SequenceNumbers));
    s.offer_words(&packets(3)).unwrap();
    emit(&mut s, 0).unwrap();
    s.handle_command(CMD_RESET, CommandSeq(9), 0);
    assert_eq!((s.ring().head(), s.ring().tail()), (0, 0));
    assert_eq!(s.counters(), Default::default());
    assert!(s.poll_output(100).is_none());
    assert!(s.next_wakeup(100).is_none());
    // The CSN memory is gone too, so a repeated START runs again.
    s.handle_command(CMD_START, CommandSeq(1), 0);
    assert!(s.is_ready());
}

#[test]
fn delay_gate_spaces_data_frames() {
    let mut cfg = config(4, EarlyRetransmit::SequenceNumbers);
    cfg.delay.initial_delay = 100;
    let mut s = started(cfg);
    s.offer_words(&packets(2)).unwrap();
    assert!(s.poll_output(1000).is_some());
    assert!(s.poll_output(1050).is_none());
    assert_eq!(s.next_wakeup(1050), Some(1100));
    assert!(s.poll_output(1100).is_some());
}

#[test]
fn scan_retransmits_after_holdoff() {
    let mut cfg = config(4, EarlyRetransmit::Disabled);
    cfg.retransmit_holdoff = 500;
    let mut s = started(cfg);
    s.offer_words(&packets(1)).unwrap();
    assert_eq!(emit(&mut s, 0), Some((0, 0, EmissionKind::Fresh)));
    assert_eq!(emit(&mut s, 499), None);
    assert_eq!(s.next_wakeup(10), Some(500));
    assert_eq!(emit(&mut s, 500), Some((0, 1, EmissionKind::Retransmit)));
}

proptest! {
    #[test]
    fn duplicates_never_rerun_a_command(dups in prop::collection::vec(1usize..5, 1..30)) {
        let (mut s, calls) = counting_core(SenderConfig::default());
        let mut responses = 0;
        for (i, &n) in dups.iter().enumerate() {
            let csn = CommandSeq(i as u16 + 1);
            let mut seen = None;
            for _ in 0..n {
                s.handle_command(CMD_USER_MIN + 1, csn, i as u32);
                let r = lone_response(&mut s);
                prop_assert_eq!(r.csn, csn);
                prop_assert!(seen.is_none_or(|p| p == r));
                seen = Some(r);
                responses += 1;
            }
        }
        prop_assert_eq!(calls.load(Ordering::SeqCst), dups.len() as u64);
        prop_assert_eq!(responses, dups.iter().sum::<usize>());
    }

    #[test]
    fn ring_stays_consistent_under_random_operations(
        n_fpga in 1u32..5,
        ops in prop::collection::vec((0u8..4, any::<u16>()), 1..400),
    ) {
        let mut s = started(config(n_fpga, EarlyRetransmit::SequenceNumbers));
        let mut sent: Vec<(u32, u16)> = Vec::new();
        let mut now = 0u64;
        let mut offered = 0u64;
        for (op, r) in ops {
            now += 1;
            match op {
                0 => {
                    let want = (r % 3000) as usize;
                    let words: Vec<u64> = (offered..offered + want as u64).collect();
                    offered += s.offer_words(&words).unwrap() as u64;
                }
                1 | 2 => {
                    if let Some((pkt, seq, _)) = emit(&mut s, now) {
                        sent.push((pkt, seq));
                    }
                }
                _ => {
                    if !sent.is_empty() {
                        let (pkt, seq) = sent[r as usize % sent.len()];
                        ack(&mut s, seq, pkt);
                    }
                }
            }
            let ring = s.ring();
            prop_assert!(ring.occupied() as u64 <= ring.capacity());
            prop_assert_eq!(ring.head_packet().0.wrapping_sub(ring.tail_packet().0), ring.occupied() as u32);
            for d in ring.occupied_descriptors() {
                prop_assert!(d.valid);
                prop_assert!(!d.confirmed || d.sent);
                if d.sent {
                    let last = sent.iter().rev().find(|(p, _)| *p == d.pkt.0).map(|&(_, q)| q);
                    prop_assert_eq!(last, Some(d.seq.0));
                }
            }
            prop_assert!(!ring.descriptor(ring.tail()).confirmed);
        }
    }
}
