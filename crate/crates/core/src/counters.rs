//! Multiply-accumulate instrumentation for the decode kernels.
//!
//! Kernels are generic over [`MacSink`]; passing [`NoCount`] compiles the
//! counting away. Counts are added once per innermost loop, with the loop's
//! trip count, so they measure the work actually executed.

use serde::{Deserialize, Serialize};

pub trait MacSink {
    /// Feature-space dot products (`B_Q · B_K`, or `q · b_K` for dense queries).
    fn score(&mut self, n: u64);
    /// Per-head rank mixing into logits.
    fn mix(&mut self, n: u64);
    /// Value weighting and aggregation.
    fn value(&mut self, n: u64);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoCount;

impl MacSink for NoCount {
    #[inline(always)]
    fn score(&mut self, _: u64) {}
    #[inline(always)]
    fn mix(&mut self, _: u64) {}
    #[inline(always)]
    fn value(&mut self, _: u64) {}
}

/// Counter dump, serialized as `{"mac_score", "mac_mix", "mac_value"}`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounts {
    pub mac_score: u64,
    pub mac_mix: u64,
    pub mac_value: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.mac_score + self.mac_mix + self.mac_value
    }
}

impl MacSink for MacCounts {
    #[inline]
    fn score(&mut self, n: u64) {
        self.mac_score += n;
    }
    #[inline]
    fn mix(&mut self, n: u64) {
        self.mac_mix += n;
    }
    #[inline]
    fn value(&mut self, n: u64) {
        self.mac_value += n;
    }
}
