//! Acceptance and cost accounting shared by all samplers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub proposed: u64,
    pub accepted: u64,
}

impl Rate {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    fn merge(&mut self, other: &Rate) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
    }
}

/// Rates per update type, overall and per time index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub total: Rate,
    pub by_time: Vec<Rate>,
}

impl RateTable {
    pub fn record(&mut self, time: usize, accepted: bool) {
        self.total.record(accepted);
        if self.by_time.len() <= time {
            self.by_time.resize(time + 1, Rate::default());
        }
        self.by_time[time].record(accepted);
    }

    /// Smallest and largest per-time rate among times with at least one proposal.
    pub fn range(&self) -> Option<(f64, f64)> {
        let rates: Vec<f64> = self.by_time.iter().filter_map(Rate::rate).collect();
        if rates.is_empty() {
            return None;
        }
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((lo, hi))
    }

    fn merge(&mut self, other: &RateTable, reverse_len: Option<usize>) {
        self.total.merge(&other.total);
        for (t, r) in other.by_time.iter().enumerate() {
            let time = match reverse_len {
                Some(n) => n - 1 - t,
                None => t,
            };
            if self.by_time.len() <= time {
                self.by_time.resize(time + 1, Rate::default());
            }
            self.by_time[time].merge(r);
        }
    }
}

/// Density-evaluation counters and acceptance statistics for one chain.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub trans_evals: u64,
    pub obs_evals: u64,
    pub autoregressive: RateTable,
    pub shift: RateTable,
    pub flip: RateTable,
    pub independence: RateTable,
    pub metropolis: RateTable,
}

impl Tally {
    pub fn density_evals(&self) -> u64 {
        self.trans_evals + self.obs_evals
    }

    pub fn merge(&mut self, other: &Tally) {
        self.merge_impl(other, None);
    }

    /// Merges a tally recorded on the time-reversed sequence of length `n`.
    pub fn merge_reversed(&mut self, other: &Tally, n: usize) {
        self.merge_impl(other, Some(n));
    }

    fn merge_impl(&mut self, other: &Tally, reverse_len: Option<usize>) {
        self.trans_evals += other.trans_evals;
        self.obs_evals += other.obs_evals;
        self.autoregressive.merge(&other.autoregressive, reverse_len);
        self.shift.merge(&other.shift, reverse_len);
        self.flip.merge(&other.flip, reverse_len);
        self.independence.merge(&other.independence, reverse_len);
        self.metropolis.merge(&other.metropolis, reverse_len);
    }
}
