//! Agent subsets as fixed-width bit patterns, viability checks and the
//! pruned enumeration of the coalition space.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AgentId, WorkflowGraph};

/// Largest agent count for which the full `2^N` coalition space is enumerated.
pub const MAX_ENUMERABLE_AGENTS: usize = 24;

/// Largest agent count a coalition bit pattern can hold.
pub const MAX_AGENTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoalitionError {
    #[error("graph has {agents} agents; exact enumeration supports at most {MAX_ENUMERABLE_AGENTS}")]
    GraphTooLarge { agents: usize },
}

/// A subset of agents, one bit per agent index.
///
/// Equality, ordering and hashing are by bit pattern, so two coalitions with
/// the same members are interchangeable as map keys.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(u64);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub const fn from_bits(bits: u64) -> Self {
        Coalition(bits)
    }

    pub const fn bits(self) -> u64 {
        self.0
    }

    /// The grand coalition over `n` agents.
    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_AGENTS, "coalition width exceeds {MAX_AGENTS} agents");
        if n == MAX_AGENTS {
            Coalition(u64::MAX)
        } else {
            Coalition((1u64 << n) - 1)
        }
    }

    pub fn singleton(agent: AgentId) -> Self {
        Coalition(1u64 << agent.index())
    }

    pub fn from_agents<I: IntoIterator<Item = AgentId>>(agents: I) -> Self {
        agents.into_iter().fold(Coalition::EMPTY, |acc, a| acc.with(a))
    }

    pub fn contains(self, agent: AgentId) -> bool {
        self.0 & (1u64 << agent.index()) != 0
    }

    #[must_use]
    pub fn with(self, agent: AgentId) -> Self {
        Coalition(self.0 | (1u64 << agent.index()))
    }

    #[must_use]
    pub fn without(self, agent: AgentId) -> Self {
        Coalition(self.0 & !(1u64 << agent.index()))
    }

    #[must_use]
    pub fn intersection(self, other: Coalition) -> Self {
        Coalition(self.0 & other.0)
    }

    #[must_use]
    pub fn union(self, other: Coalition) -> Self {
        Coalition(self.0 | other.0)
    }

    pub fn is_subset_of(self, other: Coalition) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Members in ascending index order.
    pub fn iter(self) -> Members {
        Members(self.0)
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|a| a.index())).finish()
    }
}

impl FromIterator<AgentId> for Coalition {
    fn from_iter<I: IntoIterator<Item = AgentId>>(iter: I) -> Self {
        Coalition::from_agents(iter)
    }
}

impl IntoIterator for Coalition {
    type Item = AgentId;
    type IntoIter = Members;

    fn into_iter(self) -> Members {
        self.iter()
    }
}

/// Iterator over the members of a [`Coalition`].
#[derive(Debug, Clone)]
pub struct Members(u64);

impl Iterator for Members {
    type Item = AgentId;

    fn next(&mut self) -> Option<AgentId> {
        if self.0 == 0 {
            return None;
        }
        let idx = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(AgentId::new(idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.0.count_ones() as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Members {}

/// Outcome of the three structural viability predicates for one coalition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ViabilityReport {
    pub has_trader: bool,
    pub has_source: bool,
    pub connected: bool,
    pub viable: bool,
}

/// Evaluates the sink, source and connectivity predicates for `coalition`.
///
/// `connected` is only true when some source member reaches the sink inside
/// the subgraph induced by the coalition, so it is false whenever either of
/// the other two predicates fails.
pub fn check_viability(graph: &WorkflowGraph, coalition: Coalition) -> ViabilityReport {
    let has_trader = coalition.contains(graph.sink());
    let present_sources = coalition.intersection(graph.sources());
    let has_source = !present_sources.is_empty();
    let connected = has_trader
        && has_source
        && graph
            .reachable_within(coalition, present_sources)
            .contains(graph.sink());
    ViabilityReport {
        has_trader,
        has_source,
        connected,
        viable: has_trader && has_source && connected,
    }
}

pub fn is_viable(graph: &WorkflowGraph, coalition: Coalition) -> bool {
    check_viability(graph, coalition).viable
}

/// Every viable coalition, in ascending bit-pattern order.
///
/// Walks the plain `0..2^N` counter and filters by the predicates; the
/// layered product structure is not assumed because sparse edge sets break it.
pub fn enumerate_viable(graph: &WorkflowGraph) -> Result<Vec<Coalition>, CoalitionError> {
    let n = graph.agent_count();
    if n > MAX_ENUMERABLE_AGENTS {
        return Err(CoalitionError::GraphTooLarge { agents: n });
    }
    Ok((0..1u64 << n)
        .map(Coalition::from_bits)
        .filter(|&s| is_viable(graph, s))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoalitionCounts {
    pub total: u64,
    pub viable: u64,
    pub reduction_fraction: f64,
}

pub fn coalition_counts(graph: &WorkflowGraph) -> Result<CoalitionCounts, CoalitionError> {
    let viable = enumerate_viable(graph)?.len() as u64;
    let total = 1u64 << graph.agent_count();
    Ok(CoalitionCounts {
        total,
        viable,
        reduction_fraction: 1.0 - viable as f64 / total as f64,
    })
}
