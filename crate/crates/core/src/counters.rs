use std::ops::Sub;

use serde::{Deserialize, Serialize};

/// Tallies of memory-relevant operations recorded by one context.
///
/// A reshape is any operation that relayouts a whole existing buffer. A gather
/// selects elements through an index plan and is never counted as a reshape,
/// even though it copies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub ln_passes: u64,
    pub reshapes: u64,
    pub gathers: u64,
    pub concats: u64,
    pub allocations: u64,
    pub copied_bytes: u64,
    pub flops: u64,
}

impl OpCounters {
    pub fn reset(&mut self) {
        *self = OpCounters::default();
    }

    /// Field-wise signed difference `self - earlier`.
    pub fn delta(&self, earlier: &OpCounters) -> CounterDelta {
        *self - *earlier
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterDelta {
    pub ln_passes: i64,
    pub reshapes: i64,
    pub gathers: i64,
    pub concats: i64,
    pub allocations: i64,
    pub copied_bytes: i64,
    pub flops: i64,
}

impl CounterDelta {
    pub fn is_zero(&self) -> bool {
        *self == CounterDelta::default()
    }
}

impl Sub for OpCounters {
    type Output = CounterDelta;

    fn sub(self, rhs: OpCounters) -> CounterDelta {
        let d = |a: u64, b: u64| a as i64 - b as i64;
        CounterDelta {
            ln_passes: d(self.ln_passes, rhs.ln_passes),
            reshapes: d(self.reshapes, rhs.reshapes),
            gathers: d(self.gathers, rhs.gathers),
            concats: d(self.concats, rhs.concats),
            allocations: d(self.allocations, rhs.allocations),
            copied_bytes: d(self.copied_bytes, rhs.copied_bytes),
            flops: d(self.flops, rhs.flops),
        }
    }
}
