//! Fixtures shared by the attribution benchmarks.

use std::collections::BTreeMap;

use coalcredit::coalition::Coalition;
use coalcredit::graph::{AgentId, WorkflowGraph};
use coalcredit::shapley::{BoxError, NodeExecutor};

/// Deterministic pseudo-random game value, zero off the viable set.
pub fn hashed_value(graph: &WorkflowGraph, s: Coalition) -> f64 {
    if !coalcredit::coalition::is_viable(graph, s) {
        return 0.0;
    }
    let mut z = s.bits().wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z ^= z >> 29;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Executor whose output is the sum of its inputs plus its own index.
pub struct SumExecutor;

impl NodeExecutor for SumExecutor {
    type Output = u64;
    type Episode = ();

    fn execute(&self, agent: AgentId, upstream: &BTreeMap<AgentId, u64>, _: &()) -> Result<u64, BoxError> {
        Ok(upstream.values().sum::<u64>() + agent.index() as u64)
    }
}
