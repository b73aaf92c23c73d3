//! Matmul-level floating-point operation accounting.
//!
//! Every matrix product of shape `m×k · k×n` is charged `2·m·n·k`. Products
//! that form attention scores (`QKᵀ`) or mix values (`A·V`) are additionally
//! tallied under `attention_flops`. Convolutions are charged as the equivalent
//! im2col product. Elementwise work is not counted.

use serde::Serialize;
use std::collections::BTreeMap;

/// Which counter a product feeds in addition to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopKind {
    Dense,
    Attention,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FlopLedger {
    pub matmul_flops: u64,
    pub attention_flops: u64,
    pub stages: BTreeMap<String, u64>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, stage: &str, kind: FlopKind, flops: u64) {
        self.matmul_flops += flops;
        if kind == FlopKind::Attention {
            self.attention_flops += flops;
        }
        *self.stages.entry(stage.to_string()).or_insert(0) += flops;
    }

    /// Charge a product of `batch` independent `m×k · k×n` matrices.
    pub fn charge_matmul(&mut self, stage: &str, kind: FlopKind, batch: usize, m: usize, k: usize, n: usize) {
        self.charge(stage, kind, 2 * (batch * m * k * n) as u64);
    }

    pub fn stage(&self, name: &str) -> u64 {
        self.stages.get(name).copied().unwrap_or(0)
    }

    /// Sum of all stages whose name starts with `prefix`.
    pub fn stage_prefix(&self, prefix: &str) -> u64 {
        self.stages
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        self.matmul_flops += other.matmul_flops;
        self.attention_flops += other.attention_flops;
        for (k, v) in &other.stages {
            *self.stages.entry(k.clone()).or_insert(0) += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charges_accumulate_per_stage() {
        let mut l = FlopLedger::new();
        l.charge_matmul("a", FlopKind::Dense, 1, 2, 3, 4);
        l.charge_matmul("a", FlopKind::Attention, 2, 1, 1, 1);
        l.charge_matmul("b", FlopKind::Dense, 1, 1, 1, 1);
        assert_eq!(l.matmul_flops, 48 + 4 + 2);
        assert_eq!(l.attention_flops, 4);
        assert_eq!(l.stage("a"), 52);
        assert_eq!(l.stage_prefix(""), 54);
    }
}
