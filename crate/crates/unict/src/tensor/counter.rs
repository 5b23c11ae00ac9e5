//! Multiply-accumulate accounting for recorded graphs.

use std::collections::BTreeMap;

/// Deterministic MAC tally with a per-op-kind breakdown.
///
/// Counts depend only on the recorded op sequence and shapes, so two
/// identical forward passes always produce identical counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounter {
    total: u64,
    by_op: BTreeMap<&'static str, u64>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, op: &'static str, macs: u64) {
        self.total += macs;
        *self.by_op.entry(op).or_insert(0) += macs;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn get(&self, op: &str) -> u64 {
        self.by_op.get(op).copied().unwrap_or(0)
    }

    pub fn breakdown(&self) -> impl Iterator<Item = (&'static str, u64)> + '_ {
        self.by_op.iter().map(|(k, v)| (*k, *v))
    }

    pub fn merge(&mut self, other: &OpCounter) {
        for (op, macs) in other.breakdown() {
            self.add(op, macs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallies_per_op_and_total() {
        let mut c = OpCounter::new();
        c.add("matmul", 100);
        c.add("conv2d", 50);
        c.add("matmul", 10);
        assert_eq!(c.total(), 160);
        assert_eq!(c.get("matmul"), 110);
        assert_eq!(c.get("conv2d"), 50);
        assert_eq!(c.get("missing"), 0);
    }
}
