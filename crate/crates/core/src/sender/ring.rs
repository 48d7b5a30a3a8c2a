use std::collections::VecDeque;

use bytes::Bytes;

use crate::serial::{FrameSeq, PacketNumber};

/// Metadata of one packet buffer slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PacketDescriptor {
    pub valid: bool,
    pub sent: bool,
    pub confirmed: bool,
    pub flushed: bool,
    pub pkt: PacketNumber,
    /// Sequence number of this packet's most recent emission.
    pub seq: FrameSeq,
}

#[derive(Debug, Clone)]
pub(crate) struct Slot {
    pub desc: PacketDescriptor,
    pub data: Bytes,
    /// `Some` for the final packet of a stream.
    pub valid_words: Option<u64>,
    pub last_emit: u64,
    pub queued_early: bool,
    /// Queued for early retransmission although its last emission came
    /// after the acknowledged frame.
    pub spurious: bool,
}

/// Ring of `2^n_fpga` packet slots. Packet `P` lives in slot `P mod 2^n_fpga`.
///
/// Only the occupied window `[tail, tail + len)` is materialized, so even a
/// 2^32-slot ring costs memory proportional to the packets in flight.
#[derive(Debug, Clone)]
pub struct DescriptorRing {
    n_fpga: u32,
    tail_pkt: PacketNumber,
    pub(crate) slots: VecDeque<Slot>,
}

impl DescriptorRing {
    pub fn new(n_fpga: u32) -> Self {
        DescriptorRing { n_fpga, tail_pkt: PacketNumber(0), slots: VecDeque::new() }
    }

    pub fn n_fpga(&self) -> u32 {
        self.n_fpga
    }

    /// Number of slots, `2^n_fpga`.
    pub fn capacity(&self) -> u64 {
        1u64 << self.n_fpga
    }

    pub fn slot_of(&self, pkt: PacketNumber) -> u64 {
        pkt.0 as u64 & (self.capacity() - 1)
    }

    pub fn tail_packet(&self) -> PacketNumber {
        self.tail_pkt
    }

    /// Packet number the next filled packet will get.
    pub fn head_packet(&self) -> PacketNumber {
        self.tail_pkt.wrapping_add(self.slots.len() as u32)
    }

    pub fn tail(&self) -> u64 {
        self.slot_of(self.tail_pkt)
    }

    pub fn head(&self) -> u64 {
        self.slot_of(self.head_packet())
    }

    /// Packets with V=1 currently held.
    pub fn occupied(&self) -> usize {
        self.slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() as u64 >= self.capacity()
    }

    pub(crate) fn push(&mut self, data: Bytes, valid_words: Option<u64>) -> PacketNumber {
        debug_assert!(!self.is_full());
        let pkt = self.head_packet();
        let desc = PacketDescriptor { valid: true, flushed: valid_words.is_some(), pkt, ..Default::default() };
        self.slots.push_back(Slot { desc, data, valid_words, last_emit: 0, queued_early: false, spurious: false });
        pkt
    }

    /// Offset of `pkt` inside the occupied window, if it is there.
    pub(crate) fn offset_of(&self, pkt: PacketNumber) -> Option<usize> {
        let off = pkt.distance_from(self.tail_pkt) as usize;
        (off < self.slots.len()).then_some(off)
    }

    pub(crate) fn get_mut(&mut self, pkt: PacketNumber) -> Option<&mut Slot> {
        let off = self.offset_of(pkt)?;
        self.slots.get_mut(off)
    }

    /// Frees every leading confirmed packet; returns how many were freed.
    pub(crate) fn advance_tail(&mut self) -> usize {
        let mut freed = 0;
        while self.slots.front().is_some_and(|s| s.desc.confirmed) {
            self.slots.pop_front();
            self.tail_pkt = self.tail_pkt.next();
            freed += 1;
        }
        freed
    }

    /// Descriptor stored in ring slot `slot`; free slots read as all-clear.
    pub fn descriptor(&self, slot: u64) -> PacketDescriptor {
        let off = slot.wrapping_sub(self.tail()) & (self.capacity() - 1);
        self.slots.get(off as usize).map(|s| s.desc).unwrap_or_default()
    }

    /// Descriptors of occupied slots, oldest first.
    pub fn occupied_descriptors(&self) -> impl Iterator<Item = &PacketDescriptor> {
        self.slots.iter().map(|s| &s.desc)
    }
}
