use std::cmp::Ordering;
use std::collections::HashMap;

use bytes::Bytes;

use crate::profile::{PACKET_BYTES, WORD_BYTES};
use crate::serial::{packet_newer, PacketNumber};

/// Snapshot returned by [`ReceiverSlotBuffer::pointers`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pointers {
    /// Byte offset of the next byte to be written.
    pub head: u64,
    /// Byte offset of the oldest unread byte.
    pub tail: u64,
    pub available: u64,
}

/// How an incoming data packet relates to the buffer window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Already stored, or older than everything in the buffer.
    Duplicate,
    /// Beyond the receive window.
    AheadOfWindow,
    /// New, but its slot still holds unread bytes.
    NoSpace,
    /// New and storable; carries the stream-absolute packet index.
    New(u64),
}

#[derive(Debug, Clone)]
struct RxSlot {
    last_confirmed_pkt: PacketNumber,
    data: Bytes,
    /// Bytes exposed to the consumer.
    valid_len: usize,
}

/// Circular buffer of `2^n_cpu` packet slots. Packet `P` lands in slot
/// `P mod 2^n_cpu`; the consumer sees a contiguous byte stream between the
/// tail and head pointers.
///
/// Pointers are kept as stream-absolute byte counts and reduced modulo the
/// capacity on read, so a full buffer is distinguishable from an empty one.
/// Slot storage is sparse: only slots holding unread or out-of-order data
/// are allocated.
#[derive(Debug, Clone)]
pub struct ReceiverSlotBuffer {
    n_cpu: u32,
    slots: HashMap<u64, RxSlot>,
    next_expected: PacketNumber,
    next_expected_abs: u64,
    head_abs: u64,
    tail_abs: u64,
    last_packet: Option<PacketNumber>,
}

impl ReceiverSlotBuffer {
    pub fn new(n_cpu: u32) -> Self {
        ReceiverSlotBuffer {
            n_cpu,
            slots: HashMap::new(),
            next_expected: PacketNumber(0),
            next_expected_abs: 0,
            head_abs: 0,
            tail_abs: 0,
            last_packet: None,
        }
    }

    pub fn n_cpu(&self) -> u32 {
        self.n_cpu
    }

    pub fn slot_count(&self) -> u64 {
        1u64 << self.n_cpu
    }

    /// Buffer length in bytes.
    pub fn capacity(&self) -> u64 {
        self.slot_count() * PACKET_BYTES as u64
    }

    fn slot_of_abs(&self, abs: u64) -> u64 {
        abs & (self.slot_count() - 1)
    }

    pub fn next_expected(&self) -> PacketNumber {
        self.next_expected
    }

    pub fn last_packet(&self) -> Option<PacketNumber> {
        self.last_packet
    }

    pub fn pointers(&self) -> Pointers {
        let cap = self.capacity();
        Pointers { head: self.head_abs % cap, tail: self.tail_abs % cap, available: self.head_abs - self.tail_abs }
    }

    pub fn available(&self) -> u64 {
        self.head_abs - self.tail_abs
    }

    /// Bytes handed to the consumer since the stream began.
    pub fn consumed_total(&self) -> u64 {
        self.tail_abs
    }

    /// Stream has ended and every packet up to the last one is in.
    pub fn is_complete(&self) -> bool {
        self.last_packet.is_some_and(|last| self.next_expected == last.next())
    }

    pub fn classify(&self, pkt: PacketNumber) -> Placement {
        if packet_newer(pkt, self.next_expected) == Ordering::Less {
            return Placement::Duplicate;
        }
        let dist = pkt.distance_from(self.next_expected) as u64;
        if dist >= self.slot_count() {
            return Placement::AheadOfWindow;
        }
        let abs = self.next_expected_abs + dist;
        if let Some(slot) = self.slots.get(&self.slot_of_abs(abs)) {
            if slot.last_confirmed_pkt == pkt {
                return Placement::Duplicate;
            }
        }
        if (abs + 1) * PACKET_BYTES as u64 > self.tail_abs + self.capacity() {
            return Placement::NoSpace;
        }
        Placement::New(abs)
    }

    /// Stores a packet classified as [`Placement::New`] and advances the head
    /// over the contiguous prefix. `valid_words` is set for the final packet.
    /// Returns the number of bytes the head moved.
    pub fn store(&mut self, abs: u64, pkt: PacketNumber, data: Bytes, valid_words: Option<u64>) -> u64 {
        let valid_len = match valid_words {
            Some(n) => {
                self.last_packet = Some(pkt);
                n as usize * WORD_BYTES
            }
            None => PACKET_BYTES,
        };
        let slot = self.slot_of_abs(abs);
        self.slots.insert(slot, RxSlot { last_confirmed_pkt: pkt, data, valid_len });
        let before = self.head_abs;
        while !self.is_complete() {
            let slot = self.slot_of_abs(self.next_expected_abs);
            match self.slots.get(&slot) {
                Some(s) if s.last_confirmed_pkt == self.next_expected => {
                    self.head_abs += s.valid_len as u64;
                    self.next_expected = self.next_expected.next();
                    self.next_expected_abs += 1;
                }
                _ => break,
            }
        }
        self.head_abs - before
    }

    /// Copies unread bytes starting at the tail into `buf` without consuming.
    pub fn peek(&self, buf: &mut [u8]) -> usize {
        let n = (buf.len() as u64).min(self.available()) as usize;
        let mut done = 0;
        while done < n {
            let pos = self.tail_abs + done as u64;
            let abs = pos / PACKET_BYTES as u64;
            let off = (pos % PACKET_BYTES as u64) as usize;
            let slot = &self.slots[&self.slot_of_abs(abs)];
            let take = (slot.valid_len - off).min(n - done);
            buf[done..done + take].copy_from_slice(&slot.data[off..off + take]);
            done += take;
        }
        n
    }

    /// Advances the tail by `n` bytes, releasing fully read slots.
    pub fn consume(&mut self, n: u64) -> Result<u64, u64> {
        if n > self.available() {
            return Err(self.available());
        }
        let first = self.tail_abs / PACKET_BYTES as u64;
        self.tail_abs += n;
        let last = self.tail_abs / PACKET_BYTES as u64;
        for abs in first..last {
            let slot = self.slot_of_abs(abs);
            self.slots.remove(&slot);
        }
        Ok(self.tail_abs % self.capacity())
    }

    /// Stream-absolute indices of packets currently held, with their numbers.
    pub fn stored_packets(&self) -> Vec<(u64, PacketNumber)> {
        let base = self.tail_abs / PACKET_BYTES as u64;
        let mut out: Vec<_> = self
            .slots
            .values()
            .map(|s| (base + s.last_confirmed_pkt.distance_from(PacketNumber(base as u32)) as u64, s.last_confirmed_pkt))
            .collect();
        out.sort_unstable_by_key(|&(abs, _)| abs);
        out
    }

    /// Stream-absolute packet index of the oldest byte not yet read.
    pub fn tail_packet_abs(&self) -> u64 {
        self.tail_abs / PACKET_BYTES as u64
    }
}
