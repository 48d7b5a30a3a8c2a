use serde::{Deserialize, Serialize};

/// Tuning of the inter-packet delay adaptation. Delays are in byte-times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayTuning {
    pub hi_threshold: f64,
    pub lo_threshold: f64,
    /// Data-frame emissions per evaluation.
    pub adapt_window: u32,
    pub delay_step: u32,
    pub min_delay: u32,
    pub max_delay: u32,
    pub initial_delay: u32,
}

impl Default for DelayTuning {
    fn default() -> Self {
        DelayTuning {
            hi_threshold: 0.05,
            lo_threshold: 0.01,
            adapt_window: 1024,
            delay_step: 512,
            min_delay: 0,
            max_delay: 1 << 20,
            initial_delay: 0,
        }
    }
}

impl DelayTuning {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_delay > self.max_delay {
            return Err("min_delay exceeds max_delay".into());
        }
        if !(self.min_delay..=self.max_delay).contains(&self.initial_delay) {
            return Err("initial_delay outside [min_delay, max_delay]".into());
        }
        if self.adapt_window == 0 {
            return Err("adapt_window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lo_threshold)
            || !(0.0..=1.0).contains(&self.hi_threshold)
            || self.lo_threshold > self.hi_threshold
        {
            return Err("thresholds must satisfy 0 <= lo <= hi <= 1".into());
        }
        Ok(())
    }
}

/// One completed evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdaptRecord {
    pub transmitted: u32,
    pub retransmitted: u32,
    pub ratio: f64,
    pub delay: u32,
}

#[derive(Debug, Clone)]
pub struct DelayAdapter {
    tuning: DelayTuning,
    tx_count: u32,
    retx_count: u32,
    current_delay: u32,
    history: Vec<AdaptRecord>,
}

impl DelayAdapter {
    pub fn new(tuning: DelayTuning) -> Self {
        DelayAdapter { tuning, tx_count: 0, retx_count: 0, current_delay: tuning.initial_delay, history: Vec::new() }
    }

    pub fn current_delay(&self) -> u32 {
        self.current_delay
    }

    pub fn history(&self) -> &[AdaptRecord] {
        &self.history
    }

    /// Counts one data-frame emission and re-evaluates once the window is full.
    pub fn record(&mut self, retransmission: bool) {
        if retransmission {
            self.retx_count += 1;
        } else {
            self.tx_count += 1;
        }
        if self.tx_count + self.retx_count >= self.tuning.adapt_window {
            self.adapt_delay();
        }
    }

    /// Applies the threshold rule to the counters gathered so far and resets them.
    pub fn adapt_delay(&mut self) -> u32 {
        let total = self.tx_count + self.retx_count;
        let ratio = if total == 0 { 0.0 } else { self.retx_count as f64 / total as f64 };
        let t = &self.tuning;
        if ratio > t.hi_threshold {
            self.current_delay = self.current_delay.saturating_add(t.delay_step).min(t.max_delay);
        } else if ratio < t.lo_threshold {
            self.current_delay = self.current_delay.saturating_sub(t.delay_step).max(t.min_delay);
        }
        self.history.push(AdaptRecord {
            transmitted: self.tx_count,
            retransmitted: self.retx_count,
            ratio,
            delay: self.current_delay,
        });
        self.tx_count = 0;
        self.retx_count = 0;
        self.current_delay
    }
}
