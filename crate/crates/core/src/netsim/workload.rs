use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::profile::WORDS_PER_PACKET;

/// Content of the generated stream. Every pattern can be regenerated on the
/// consumer side, so integrity is checked without keeping the sent data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataPattern {
    /// Incrementing 64-bit words; link `k` starts at `k << 48`.
    #[default]
    Counter,
    Prng(u64),
    Zeros,
}

/// Deterministic word generator for one link.
#[derive(Debug, Clone)]
pub struct WordStream {
    pattern: DataPattern,
    link: u64,
    index: u64,
    rng: Option<ChaCha8Rng>,
}

impl WordStream {
    pub fn new(pattern: DataPattern, link: usize) -> Self {
        let rng = match pattern {
            DataPattern::Prng(seed) => {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(link as u64);
                Some(r)
            }
            _ => None,
        };
        WordStream { pattern, link: link as u64, index: 0, rng }
    }

    pub fn position(&self) -> u64 {
        self.index
    }
}

impl Iterator for WordStream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let w = match self.pattern {
            DataPattern::Counter => (self.link << 48).wrapping_add(self.index),
            DataPattern::Zeros => 0,
            DataPattern::Prng(_) => self.rng.as_mut().expect("seeded for prng").next_u64(),
        };
        self.index += 1;
        Some(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceModel {
    /// Words offered per link.
    pub total_words: u64,
    pub pattern: DataPattern,
}

impl SourceModel {
    pub fn packets(total_packets: u64, pattern: DataPattern) -> Self {
        SourceModel { total_words: total_packets * WORDS_PER_PACKET as u64, pattern }
    }
}

/// How the consumer drains the receive buffers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum ConsumerModel {
    /// Consumes everything as soon as it appears.
    #[default]
    Unlimited,
    /// Every `period` byte-times consumes up to `rate * period` bytes.
    Limited { rate: f64, period: u64 },
}

/// Per-link source state: words generated but not yet taken by the sender.
#[derive(Debug)]
pub(crate) struct Source {
    stream: WordStream,
    remaining: u64,
    staged: Vec<u64>,
    pos: usize,
}

impl Source {
    pub fn new(model: &SourceModel, link: usize) -> Self {
        Source { stream: WordStream::new(model.pattern, link), remaining: model.total_words, staged: Vec::new(), pos: 0 }
    }

    pub fn is_exhausted(&self) -> bool {
        self.remaining == 0 && self.pos == self.staged.len()
    }

    /// Words waiting to be offered, refilled in packet-sized batches.
    pub fn pending(&mut self) -> &[u64] {
        if self.pos == self.staged.len() && self.remaining > 0 {
            let n = self.remaining.min(WORDS_PER_PACKET as u64);
            self.staged.clear();
            self.staged.extend(self.stream.by_ref().take(n as usize));
            self.remaining -= n;
            self.pos = 0;
        }
        &self.staged[self.pos..]
    }

    pub fn take(&mut self, n: usize) {
        self.pos += n;
    }
}

/// Per-link consumer state: checks every consumed word against the pattern.
#[derive(Debug)]
pub(crate) struct Consumer {
    expected: WordStream,
    pub words_checked: u64,
    pub mismatches: u64,
    pub credit: u64,
}

impl Consumer {
    pub fn new(pattern: DataPattern, link: usize) -> Self {
        Consumer { expected: WordStream::new(pattern, link), words_checked: 0, mismatches: 0, credit: 0 }
    }

    pub fn verify(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks_exact(8) {
            let got = u64::from_be_bytes(chunk.try_into().expect("8-byte chunk"));
            if Some(got) != self.expected.next() {
                self.mismatches += 1;
            }
            self.words_checked += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_streams_differ_per_link() {
        let a: Vec<_> = WordStream::new(DataPattern::Counter, 0).take(3).collect();
        let b: Vec<_> = WordStream::new(DataPattern::Counter, 1).take(3).collect();
        assert_eq!(a, vec![0, 1, 2]);
        assert_eq!(b, vec![1 << 48, (1 << 48) + 1, (1 << 48) + 2]);
    }

    #[test]
    fn prng_stream_is_reproducible() {
        let a: Vec<_> = WordStream::new(DataPattern::Prng(9), 0).take(16).collect();
        let b: Vec<_> = WordStream::new(DataPattern::Prng(9), 0).take(16).collect();
        let c: Vec<_> = WordStream::new(DataPattern::Prng(9), 1).take(16).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn source_batches_by_packet() {
        let mut s = Source::new(&SourceModel { total_words: 1500, pattern: DataPattern::Counter }, 0);
        assert_eq!(s.pending().len(), 1024);
        s.take(1000);
        assert_eq!(s.pending().len(), 24);
        s.take(24);
        assert_eq!(s.pending().len(), 476);
        assert_eq!(s.pending()[0], 1024);
        s.take(476);
        assert!(s.is_exhausted());
    }
}
