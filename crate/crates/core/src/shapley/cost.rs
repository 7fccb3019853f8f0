//! Closed-form execution counts for the classical and memoized engines.

use serde::Serialize;

use super::ShapleyError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PredictedCost {
    /// Unique upstream configurations per layer.
    pub unique_configs: Vec<u64>,
    pub total_executions: u64,
    /// Exact only for fully connected consecutive layers.
    pub viable_coalitions: u64,
}

/// Memoized execution count from the per-layer product formula:
/// `|U_i| = prod_{j<i} (2^|L_j| - d_j)` and `total = sum_i |U_i| * |L_i|`,
/// where `d_j` is 1 for mandatory layers.
///
/// The viable count `prod_j (2^|L_j| - d_j)` assumes complete bipartite edges
/// between consecutive layers.
pub fn predicted_cost(layer_sizes: &[usize], mandatory: &[bool]) -> Result<PredictedCost, ShapleyError> {
    if layer_sizes.is_empty() || layer_sizes.contains(&0) {
        return Err(ShapleyError::EmptyLayer);
    }
    if mandatory.len() != layer_sizes.len() {
        return Err(ShapleyError::FlagCountMismatch {
            layers: layer_sizes.len(),
            flags: mandatory.len(),
        });
    }
    let factor = |size: usize, flag: bool| -> Result<u64, ShapleyError> {
        let options = 1u64
            .checked_shl(size as u32)
            .filter(|_| size < 64)
            .ok_or(ShapleyError::Overflow)?;
        Ok(options - u64::from(flag))
    };
    let mut unique_configs = Vec::with_capacity(layer_sizes.len());
    let mut running: u64 = 1;
    let mut total: u64 = 0;
    for (&size, &flag) in layer_sizes.iter().zip(mandatory) {
        unique_configs.push(running);
        total = running
            .checked_mul(size as u64)
            .and_then(|x| total.checked_add(x))
            .ok_or(ShapleyError::Overflow)?;
        running = running.checked_mul(factor(size, flag)?).ok_or(ShapleyError::Overflow)?;
    }
    Ok(PredictedCost {
        unique_configs,
        total_executions: total,
        viable_coalitions: running,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClassicalCost {
    pub coalitions: u64,
    pub executions: u64,
}

/// Cost of evaluating every coalition with every member executed: `2^n`
/// coalitions and `n * 2^(n-1)` agent executions.
pub fn classical_cost(n: usize) -> ClassicalCost {
    assert!((1..64).contains(&n), "classical cost defined for 1..=63 agents");
    ClassicalCost {
        coalitions: 1u64 << n,
        executions: (n as u64) << (n - 1),
    }
}
