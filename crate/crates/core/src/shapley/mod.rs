//! Exact Shapley attribution: a classical engine over all `2^N` coalitions
//! and a pruned engine that only evaluates viable coalitions, backed by
//! layer-wise memoization of agent executions.

mod cost;
mod ghm;
mod weights;

use std::error::Error as StdError;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::coalition::{enumerate_viable, Coalition, CoalitionError, MAX_ENUMERABLE_AGENTS};
use crate::graph::{AgentId, WorkflowGraph};

pub use cost::{classical_cost, predicted_cost, ClassicalCost, PredictedCost};
pub use ghm::{
    audit_executions, execute_coalition, ghm_execute, upstream_configuration, CacheKey, GhmOptions, GhmRun, GhmStats,
    KeyMode, MemoCache, NodeExecutor,
};
pub use weights::shapley_weight;

pub type BoxError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error("invalid coalition size {size} for {players} players")]
    InvalidSize { size: usize, players: usize },
    #[error("{0} agents exceeds the exact-enumeration limit of {MAX_ENUMERABLE_AGENTS}")]
    TooManyAgents(usize),
    #[error("layer index {index} out of range for {layers} layers")]
    BadLayerIndex { index: usize, layers: usize },
    #[error("layer sizes must be at least 1")]
    EmptyLayer,
    #[error("{flags} mandatory flags for {layers} layers")]
    FlagCountMismatch { layers: usize, flags: usize },
    #[error("arithmetic overflow in cost computation")]
    Overflow,
    #[error(transparent)]
    Coalition(#[from] CoalitionError),
    #[error("agent {agent} failed under configuration {configuration:?}: {source}")]
    ExecutorFailure {
        agent: AgentId,
        configuration: Coalition,
        #[source]
        source: BoxError,
    },
    #[error("agent {agent} produced a different output on re-execution under {configuration:?}")]
    NonDeterminismDetected { agent: AgentId, configuration: Coalition },
    #[error("characteristic function failed on {coalition:?}: {source}")]
    Evaluation {
        coalition: Coalition,
        #[source]
        source: BoxError,
    },
}

/// Per-agent Shapley values with the cost of producing them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionResult {
    pub values: Vec<f64>,
    /// Distinct coalitions whose value was computed.
    pub coalition_evaluations: u64,
    pub agent_executions: u64,
    pub cache_hits: u64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl AttributionResult {
    pub fn total(&self) -> f64 {
        neumaier_sum(self.values.iter().copied())
    }

    pub fn max_abs_diff(&self, other: &AttributionResult) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A coalition game `v: 2^N -> R`.
///
/// Implementations must be deterministic and return 0 for the empty coalition.
pub trait CharacteristicFunction {
    fn value(&mut self, coalition: Coalition) -> Result<f64, BoxError>;
}

impl<F> CharacteristicFunction for F
where
    F: FnMut(Coalition) -> Result<f64, BoxError>,
{
    fn value(&mut self, coalition: Coalition) -> Result<f64, BoxError> {
        self(coalition)
    }
}

/// Wraps an infallible closure as a [`CharacteristicFunction`].
pub fn game<F: FnMut(Coalition) -> f64>(mut f: F) -> impl CharacteristicFunction {
    move |s: Coalition| -> Result<f64, BoxError> { Ok(f(s)) }
}

/// Classical Shapley values: every one of the `2^n` coalitions is evaluated
/// exactly once.
pub fn shapley_exact<V: CharacteristicFunction>(v: &mut V, n: usize) -> Result<AttributionResult, ShapleyError> {
    if n > MAX_ENUMERABLE_AGENTS {
        return Err(ShapleyError::TooManyAgents(n));
    }
    let start = Instant::now();
    let mut table = Vec::with_capacity(1 << n);
    for bits in 0..1u64 << n {
        let s = Coalition::from_bits(bits);
        table.push(
            v.value(s)
                .map_err(|source| ShapleyError::Evaluation { coalition: s, source })?,
        );
    }
    Ok(AttributionResult {
        values: shapley_from_table(n, &table)?,
        coalition_evaluations: 1 << n,
        agent_executions: 0,
        cache_hits: 0,
        elapsed: start.elapsed(),
    })
}

/// Shapley values over the pruned coalition space.
///
/// Only viable coalitions are evaluated; every other coalition takes the
/// value 0 without being executed. The marginal sums still range over all
/// subsets, so the result equals [`shapley_exact`] on the zero-extended game.
pub fn shapley_dag<V: CharacteristicFunction>(
    graph: &WorkflowGraph,
    v: &mut V,
) -> Result<AttributionResult, ShapleyError> {
    let start = Instant::now();
    let viable = enumerate_viable(graph)?;
    let mut values = Vec::with_capacity(viable.len());
    for &s in &viable {
        values.push(
            v.value(s)
                .map_err(|source| ShapleyError::Evaluation { coalition: s, source })?,
        );
    }
    let mut result = attribution_from_viable(graph.agent_count(), &viable, &values)?;
    result.elapsed = start.elapsed();
    Ok(result)
}

/// Builds an attribution from values already computed for `viable`.
/// Every coalition not listed is worth 0.
pub fn attribution_from_viable(
    n: usize,
    viable: &[Coalition],
    values: &[f64],
) -> Result<AttributionResult, ShapleyError> {
    if n > MAX_ENUMERABLE_AGENTS {
        return Err(ShapleyError::TooManyAgents(n));
    }
    assert_eq!(viable.len(), values.len(), "one value per viable coalition");
    let mut table = vec![0.0; 1 << n];
    for (s, &value) in viable.iter().zip(values) {
        table[s.bits() as usize] = value;
    }
    Ok(AttributionResult {
        values: shapley_from_table(n, &table)?,
        coalition_evaluations: viable.len() as u64,
        agent_executions: 0,
        cache_hits: 0,
        elapsed: Duration::ZERO,
    })
}

/// Shapley values from a dense value table indexed by coalition bits.
///
/// Marginals are summed per coalition size with compensated summation and
/// scaled once by the exact size weight.
pub fn shapley_from_table(n: usize, table: &[f64]) -> Result<Vec<f64>, ShapleyError> {
    assert_eq!(table.len(), 1 << n, "table must cover all 2^n coalitions");
    if n == 0 {
        return Ok(Vec::new());
    }
    let weights = weights::weight_table(n)?;
    let mut phi = Vec::with_capacity(n);
    let mut by_size = vec![NeumaierSum::default(); n];
    for i in 0..n {
        let bit = 1u64 << i;
        by_size.iter_mut().for_each(|acc| *acc = NeumaierSum::default());
        for bits in 0..1u64 << n {
            if bits & bit != 0 {
                continue;
            }
            let marginal = table[(bits | bit) as usize] - table[bits as usize];
            by_size[bits.count_ones() as usize].add(marginal);
        }
        let mut total = NeumaierSum::default();
        for (acc, w) in by_size.iter().zip(&weights) {
            total.add(acc.value() * w);
        }
        phi.push(total.value());
    }
    Ok(phi)
}

#[derive(Debug, Clone, Copy, Default)]
struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn neumaier_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = NeumaierSum::default();
    xs.into_iter().for_each(|x| acc.add(x));
    acc.value()
}
