use bytes::Bytes;
use fade10g::codec::{
    compute_fcs, encode_frame, AckKind, CommandResponseField, DataPayload, FrameHeader, LastDataPayload, MacAddress, Payload,
};
use fade10g::profile::{CMD_RESET, CMD_START, CMD_USER_MIN, LAST_PACKET_DATA_BYTES, PACKET_BYTES};
use fade10g::receiver::{EventKind, ReceiverConfig, ReceiverCore, ReceiverError, SlaveId};
use fade10g::serial::{CommandSeq, FrameSeq, PacketNumber};
use proptest::prelude::*;

const FEB: MacAddress = MacAddress([0x02, 0, 0, 0, 0, 0x11]);

fn receiver(n_cpu: u32) -> (ReceiverCore, SlaveId) {
    let mut r = ReceiverCore::new(ReceiverConfig { n_cpu, ..Default::default() }).unwrap();
    let id = r.open_slave(FEB, 0).unwrap();
    (r, id)
}

fn header(r: &ReceiverCore) -> FrameHeader {
    FrameHeader::new(r.config().mac, FEB)
}

fn packet_bytes(pkt: u32) -> Bytes {
    (0..PACKET_BYTES).map(|i| (pkt as usize * 31 + i) as u8).collect::<Vec<u8>>().into()
}

fn data(r: &ReceiverCore, pkt: u32, seq: u16) -> Vec<u8> {
    let p = DataPayload {
        seq: FrameSeq(seq),
        packet: PacketNumber(pkt),
        delay: 77,
        cmd_response: CommandResponseField::NONE,
        data: packet_bytes(pkt),
    };
    encode_frame(&header(r), &Payload::Data(p)).unwrap()
}

fn last_data(r: &ReceiverCore, pkt: u32, seq: u16, valid_words: u64) -> Vec<u8> {
    let p = LastDataPayload {
        seq: FrameSeq(seq),
        packet: PacketNumber(pkt),
        delay: 0,
        cmd_response: CommandResponseField::NONE,
        data: packet_bytes(pkt).slice(..LAST_PACKET_DATA_BYTES),
        valid_words,
    };
    encode_frame(&header(r), &Payload::LastData(p)).unwrap()
}

fn response(r: &ReceiverCore, code: u16, csn: u16, value: u64) -> Vec<u8> {
    let f = CommandResponseField { command_code: code, csn: CommandSeq(csn), return_value: value.to_be_bytes() };
    encode_frame(&header(r), &Payload::CommandResponse(f)).unwrap()
}

fn drain(r: &mut ReceiverCore, id: SlaveId, now: u64) -> Vec<Payload> {
    std::iter::from_fn(|| r.poll_outgoing(id, now)).map(|f| f.payload).collect()
}

#[test]
fn slave_association_rules() {
    let mut r = ReceiverCore::new(ReceiverConfig { max_slaves: 2, ..Default::default() }).unwrap();
    assert_eq!(r.open_slave(MacAddress::local(1), 0).unwrap(), SlaveId(0));
    assert_eq!(r.open_slave(MacAddress::local(1), 0), Err(ReceiverError::AlreadyAssociated(MacAddress::local(1))));
    r.open_slave(MacAddress::local(2), 0).unwrap();
    assert_eq!(r.open_slave(MacAddress::local(3), 0), Err(ReceiverError::TooManySlaves(2)));
    r.free_slave(SlaveId(0)).unwrap();
    assert_eq!(r.read_pointers(SlaveId(0)), Err(ReceiverError::NotAssociated(0)));
    assert_eq!(r.open_slave(MacAddress::local(3), 0).unwrap(), SlaveId(0));
}

#[test]
fn start_queues_a_request() {
    let (mut r, id) = receiver(4);
    let csn = r.start(id).unwrap();
    let out = r.poll_outgoing(id, 0).unwrap();
    assert_eq!(out.header.destination, FEB);
    let Payload::CommandRequest(req) = out.payload else { panic!("expected a request") };
    assert_eq!((req.command_code, req.csn), (CMD_START, csn));
    assert_eq!(r.start(id), Err(ReceiverError::CommandBusy(0)));
}

#[test]
fn reset_is_fire_and_forget() {
    let (mut r, id) = receiver(4);
    r.reset_slave(id).unwrap();
    let out = drain(&mut r, id, 0);
    assert!(matches!(out[..], [Payload::CommandRequest(req)] if req.command_code == CMD_RESET));
    assert!(!r.slave(id).unwrap().has_pending_command());
    assert_eq!(r.next_deadline(), None);
}

#[test]
fn in_order_packets_move_head_and_are_acked() {
    let (mut r, id) = receiver(4);
    for p in 0..3 {
        r.handle_frame(&data(&r, p, p as u16 + 10), 0);
    }
    let ptr = r.read_pointers(id).unwrap();
    assert_eq!(ptr.available, 3 * 8192);
    assert_eq!(ptr.head, 3 * 8192);
    let acks = drain(&mut r, id, 0);
    assert_eq!(acks.len(), 3);
    for (i, a) in acks.iter().enumerate() {
        let Payload::Ack(a) = a else { panic!("expected ack") };
        assert_eq!(a.kind, AckKind::Ack);
        assert_eq!(a.packet, PacketNumber(i as u32));
        assert_eq!(a.seq, FrameSeq(i as u16 + 10));
        assert_eq!(a.delay_echo, 77);
    }
    r.consume(id, 1000).unwrap();
    assert_eq!(r.read_pointers(id).unwrap().available, 3 * 8192 - 1000);
}

#[test]
fn empty_buffer_pointers() {
    let (r, id) = receiver(4);
    let p = r.read_pointers(id).unwrap();
    assert_eq!((p.available, p.head), (0, p.tail));
    assert_eq!(r.buffer_len(id).unwrap(), 16 * 8192);
}

#[test]
fn duplicate_packet_is_reacked_without_copying() {
    let (mut r, id) = receiver(4);
    for p in 0..3 {
        r.handle_frame(&data(&r, p, p as u16), 0);
    }
    drain(&mut r, id, 0);
    let before = r.read_pointers(id).unwrap();
    r.handle_frame(&data(&r, 2, 9), 0);
    assert_eq!(r.read_pointers(id).unwrap(), before);
    let out: Vec<_> = std::iter::from_fn(|| r.poll_outgoing(id, 0)).collect();
    assert_eq!(out.len(), 1);
    assert!(out[0].reack);
    assert_eq!(r.slave(id).unwrap().counters.reacks, 1);
}

#[test]
fn packet_beyond_window_is_a_protocol_error() {
    let (mut r, id) = receiver(2);
    r.handle_frame(&data(&r, 5, 0), 0);
    let s = r.slave(id).unwrap();
    assert!(s.errors.protocol_error);
    assert_eq!(s.buffer.available(), 0);
    assert!(drain(&mut r, id, 0).is_empty());
}

#[test]
fn consume_bounds() {
    let (mut r, id) = receiver(2);
    r.handle_frame(&data(&r, 0, 0), 0);
    let tail = r.read_pointers(id).unwrap().tail;
    assert_eq!(r.consume(id, 0).unwrap(), tail);
    assert_eq!(r.consume(id, 8193), Err(ReceiverError::OverConsume { requested: 8193, available: 8192 }));
}

#[test]
fn slot_is_reused_after_consume() {
    let (mut r, id) = receiver(2);
    for p in 0..4 {
        r.handle_frame(&data(&r, p, p as u16), 0);
    }
    r.handle_frame(&data(&r, 4, 4), 0);
    assert_eq!(r.slave(id).unwrap().counters.dropped_no_space, 1);
    assert_eq!(r.read_pointers(id).unwrap().available, 4 * 8192);
    r.consume(id, 8192).unwrap();
    r.handle_frame(&data(&r, 4, 5), 0);
    let p = r.read_pointers(id).unwrap();
    assert_eq!(p.available, 4 * 8192);
    assert_eq!(p.head, 8192);
    let mut buf = vec![0u8; 4 * 8192];
    r.peek(id, &mut buf).unwrap();
    assert_eq!(&buf[3 * 8192..], &packet_bytes(4)[..]);
}

fn data_events(events: &[fade10g::receiver::ConsumerEvent]) -> usize {
    events.iter().filter(|e| matches!(e.kind, EventKind::DataAvailable { .. })).count()
}

#[test]
fn wakeup_threshold_gates_events() {
    let (mut r, id) = receiver(4);
    r.set_wakeup_threshold(id, 16384).unwrap();
    assert_eq!(data_events(&r.handle_frame(&data(&r, 0, 0), 0)), 0);
    assert_eq!(data_events(&r.handle_frame(&data(&r, 1, 1), 0)), 1);

    r.set_wakeup_threshold(id, 0).unwrap();
    assert_eq!(data_events(&r.handle_frame(&data(&r, 2, 2), 0)), 1);

    r.set_wakeup_threshold(id, 1 << 40).unwrap();
    let ev = r.handle_frame(&last_data(&r, 3, 3, 10), 0);
    assert_eq!(data_events(&ev), 0);
    assert!(ev.iter().any(|e| e.kind == EventKind::EndOfTransmission));
}

#[test]
fn end_of_transmission_waits_for_gaps_and_fires_once() {
    let (mut r, id) = receiver(4);
    let eot = |ev: Vec<fade10g::receiver::ConsumerEvent>| ev.iter().filter(|e| e.kind == EventKind::EndOfTransmission).count();
    assert_eq!(eot(r.handle_frame(&last_data(&r, 2, 2, 3), 0)), 0);
    assert_eq!(eot(r.handle_frame(&data(&r, 0, 0), 0)), 0);
    assert_eq!(eot(r.handle_frame(&data(&r, 1, 1), 0)), 1);
    assert_eq!(eot(r.handle_frame(&last_data(&r, 2, 3, 3), 0)), 0);
    let s = r.slave(id).unwrap();
    assert!(s.end_of_transmission);
    assert_eq!(s.buffer.available(), 2 * 8192 + 24);
}

#[test]
fn response_completes_command() {
    let (mut r, id) = receiver(4);
    let csn = r.send_user_command(id, CMD_USER_MIN, 4, 3, 500).unwrap();
    drain(&mut r, id, 0);
    let ev = r.handle_frame(&response(&r, CMD_USER_MIN, csn.0, 42), 100);
    assert_eq!(ev[0].kind, EventKind::CommandComplete { code: CMD_USER_MIN, csn, value: 42u64.to_be_bytes() });
    // A late duplicate response is ignored.
    assert!(r.handle_frame(&response(&r, CMD_USER_MIN, csn.0, 42), 200).is_empty());
    assert_eq!(r.slave(id).unwrap().counters.stale_responses, 1);
}

#[test]
fn unanswered_command_retries_then_times_out() {
    let (mut r, id) = receiver(4);
    let csn = r.send_user_command(id, CMD_USER_MIN, 0, 2, 1000).unwrap();
    let mut emissions = Vec::new();
    let mut timeouts = Vec::new();
    for now in (0..10_000).step_by(100) {
        timeouts.extend(r.poll_timers(now));
        emissions.extend(drain(&mut r, id, now));
    }
    assert_eq!(emissions.len(), 3);
    assert!(emissions.iter().all(|p| matches!(p, Payload::CommandRequest(q) if q.csn == csn)));
    assert_eq!(timeouts.len(), 1);
    assert_eq!(timeouts[0].kind, EventKind::CommandTimeout { code: CMD_USER_MIN, csn });
}

#[test]
fn unknown_sender_gets_reset() {
    let (mut r, _) = receiver(4);
    let stranger = MacAddress::local(77);
    let p = DataPayload {
        seq: FrameSeq(0),
        packet: PacketNumber(0),
        delay: 0,
        cmd_response: CommandResponseField::NONE,
        data: packet_bytes(0),
    };
    let frame = encode_frame(&FrameHeader::new(r.config().mac, stranger), &Payload::Data(p)).unwrap();
    r.handle_frame(&frame, 0);
    let (to, out) = r.poll_unsolicited().unwrap();
    assert_eq!(to, stranger);
    assert!(matches!(out.payload, Payload::CommandRequest(q) if q.command_code == CMD_RESET));
}

#[test]
fn old_version_is_flagged() {
    let (mut r, id) = receiver(4);
    let mut frame = encode_frame(&header(&r), &Payload::CommandResponse(CommandResponseField::NONE)).unwrap();
    frame[14..16].copy_from_slice(&0x0001u16.to_be_bytes());
    let body = frame.len() - 4;
    let fcs = compute_fcs(&frame[..body]);
    frame[body..].copy_from_slice(&fcs.to_le_bytes());
    r.handle_frame(&frame, 0);
    assert!(r.slave(id).unwrap().errors.bad_version);
}

/// Window rule written out directly: distance `d` from the next expected
/// packet is new below the window size, ahead up to half the number space,
/// and old beyond that.
#[derive(Debug, PartialEq)]
enum Expect {
    New,
    Ahead,
    Old,
}

fn window_oracle(d: u32, n_cpu: u32) -> Expect {
    if (d as u64) < 1 << n_cpu {
        Expect::New
    } else if d as u64 <= 1 << 31 {
        Expect::Ahead
    } else {
        Expect::Old
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn window_classification_matches_oracle(n_cpu in 1u32..5, received in 0u32..12, off in prop_oneof![0u32..40, any::<u32>()]) {
        let (mut r, id) = receiver(n_cpu);
        for p in 0..received {
            r.handle_frame(&data(&r, p, 0), 0);
            let avail = r.read_pointers(id).unwrap().available;
            r.consume(id, avail).unwrap();
        }
        drain(&mut r, id, 0);
        let pkt = received.wrapping_add(off);
        r.handle_frame(&data(&r, pkt, 0), 0);
        let out: Vec<_> = std::iter::from_fn(|| r.poll_outgoing(id, 0)).collect();
        let got = match (&out[..], r.slave(id).unwrap().errors.protocol_error) {
            ([a], false) if !a.reack => Expect::New,
            ([], true) => Expect::Ahead,
            ([a], false) if a.reack => Expect::Old,
            other => panic!("unexpected outcome {other:?}"),
        };
        let want = window_oracle(off, n_cpu);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn any_delivery_order_yields_the_stream(
        order in prop::collection::vec(0u32..12, 1..80),
        chunk in 1_000u64..20_000,
    ) {
        let total = 12u32;
        let (mut r, id) = receiver(3);
        let mut out = Vec::new();
        let (mut reacks, mut reacks_expected) = (0, 0);
        let mut seen = std::collections::HashSet::new();
        // The random prefix, then a sender that keeps resending every packet
        // until the stream is complete.
        let resend = (0..total).cycle().take(total as usize * 200);
        for p in order.into_iter().chain(resend) {
            if r.slave(id).unwrap().end_of_transmission {
                break;
            }
            let frame = if p == total - 1 { last_data(&r, p, 0, 5) } else { data(&r, p, 0) };
            let before = r.read_pointers(id).unwrap();
            r.handle_frame(&frame, 0);
            let stored = r.slave(id).unwrap().counters.packets_stored;
            reacks += std::iter::from_fn(|| r.poll_outgoing(id, 0)).filter(|f| f.reack).count();
            if seen.contains(&p) {
                reacks_expected += 1;
                prop_assert_eq!(r.read_pointers(id).unwrap(), before);
            }
            if stored as usize > seen.len() {
                seen.insert(p);
            }
            let avail = r.read_pointers(id).unwrap().available;
            let n = avail.min(chunk);
            let mut buf = vec![0u8; n as usize];
            r.peek(id, &mut buf).unwrap();
            r.consume(id, n).unwrap();
            out.extend(buf);
        }
        let avail = r.read_pointers(id).unwrap().available;
        let mut buf = vec![0u8; avail as usize];
        r.peek(id, &mut buf).unwrap();
        out.extend(buf);
        let mut want: Vec<u8> = (0..total - 1).flat_map(|p| packet_bytes(p).to_vec()).collect();
        want.extend_from_slice(&packet_bytes(total - 1)[..40]);
        prop_assert_eq!(out.len(), want.len());
        prop_assert_eq!(out.iter().zip(&want).position(|(a, b)| a != b), None);
        let s = r.slave(id).unwrap();
        prop_assert!(s.end_of_transmission);
        prop_assert_eq!(s.counters.end_of_transmission_events, 1);
        prop_assert_eq!(reacks, reacks_expected);
    }
}
