//! Wrapping counters used on the wire: packet numbers, frame sequence
//! numbers and command sequence numbers.
//!
//! Ordering between two wrapping values `a` and `b` of width `w` bits is
//! decided on `d = (a - b) mod 2^w`: `d == 0` is equal, `1 <= d <= 2^(w-1)`
//! means `a` is newer, anything else means `a` is older. At exactly half the
//! modulus both directions report "newer"; this matches the hardware rule and
//! callers never compare values that far apart.

use std::cmp::Ordering;
use std::fmt;

/// Compares two `bits`-wide wrapping values. `bits` must be in `1..=63`.
pub fn serial_cmp(a: u64, b: u64, bits: u32) -> Ordering {
    debug_assert!((1..64).contains(&bits));
    let mask = (1u64 << bits) - 1;
    let diff = a.wrapping_sub(b) & mask;
    if diff == 0 {
        Ordering::Equal
    } else if diff <= 1u64 << (bits - 1) {
        Ordering::Greater
    } else {
        Ordering::Less
    }
}

/// Position of a data packet in the stream; wraps modulo 2^32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PacketNumber(pub u32);

/// Per-transmission frame sequence number; wraps modulo 2^16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FrameSeq(pub u16);

/// Command sequence number (CSN).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CommandSeq(pub u16);

/// `Greater` when `a` is newer than `b` in 32-bit wrapping order.
pub fn packet_newer(a: PacketNumber, b: PacketNumber) -> Ordering {
    serial_cmp(a.0 as u64, b.0 as u64, 32)
}

/// `Greater` when `a` is newer than `b` in 16-bit wrapping order.
pub fn seq_newer(a: FrameSeq, b: FrameSeq) -> Ordering {
    serial_cmp(a.0 as u64, b.0 as u64, 16)
}

impl PacketNumber {
    pub fn next(self) -> Self {
        PacketNumber(self.0.wrapping_add(1))
    }

    pub fn wrapping_add(self, n: u32) -> Self {
        PacketNumber(self.0.wrapping_add(n))
    }

    /// Forward distance from `base` to `self`, modulo 2^32.
    pub fn distance_from(self, base: PacketNumber) -> u32 {
        self.0.wrapping_sub(base.0)
    }

    pub fn is_newer_than(self, other: PacketNumber) -> bool {
        packet_newer(self, other) == Ordering::Greater
    }
}

impl FrameSeq {
    pub fn next(self) -> Self {
        FrameSeq(self.0.wrapping_add(1))
    }

    pub fn is_newer_than(self, other: FrameSeq) -> bool {
        seq_newer(self, other) == Ordering::Greater
    }
}

impl CommandSeq {
    pub fn next(self) -> Self {
        CommandSeq(self.0.wrapping_add(1))
    }
}

impl fmt::Display for PacketNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for FrameSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for CommandSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}
