//! Layer-wise memoized execution of every viable coalition.
//!
//! Coalitions that present the same members in earlier layers feed identical
//! inputs to an agent, so with a deterministic executor each
//! `(agent, upstream configuration)` pair is executed once and shared.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use super::{BoxError, ShapleyError};
use crate::coalition::Coalition;
use crate::graph::{AgentId, WorkflowGraph};

/// Executes one agent given its upstream outputs and episode-level inputs.
///
/// Must be deterministic: identical `(agent, upstream, episode)` yield
/// identical outputs. Memoization is only sound under that premise.
pub trait NodeExecutor: Sync {
    type Output: Clone + PartialEq + Send + Sync;
    type Episode: ?Sized + Sync;

    fn execute(
        &self,
        agent: AgentId,
        upstream: &BTreeMap<AgentId, Self::Output>,
        episode: &Self::Episode,
    ) -> Result<Self::Output, BoxError>;
}

/// Members of `coalition` in layers strictly before `layer` (zero-based).
pub fn upstream_configuration(
    graph: &WorkflowGraph,
    coalition: Coalition,
    layer: usize,
) -> Result<Coalition, ShapleyError> {
    let layers = graph.layers().len();
    if layer >= layers {
        return Err(ShapleyError::BadLayerIndex { index: layer, layers });
    }
    Ok(coalition.intersection(graph.earlier_layers(layer)))
}

/// How cache keys are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyMode {
    /// Key on every coalition member in earlier layers. Reproduces the
    /// `sum |U_i| * |L_i|` execution count.
    #[default]
    LayerConfiguration,
    /// Key only on coalition members that are ancestors of the agent. Never
    /// executes more than [`KeyMode::LayerConfiguration`] and can share more
    /// on sparse graphs.
    AncestorRefined,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GhmOptions {
    pub key_mode: KeyMode,
    /// Re-executes every cached key and fails on any mismatch.
    pub verify_determinism: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub agent: AgentId,
    pub configuration: Coalition,
}

/// Write-once map from `(agent, configuration)` to agent output.
#[derive(Debug, Clone)]
pub struct MemoCache<O> {
    entries: HashMap<CacheKey, O>,
}

impl<O> Default for MemoCache<O> {
    fn default() -> Self {
        MemoCache {
            entries: HashMap::new(),
        }
    }
}

impl<O: PartialEq> MemoCache<O> {
    pub fn get(&self, key: &CacheKey) -> Option<&O> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Inserts unless present. A present entry with a different value is a
    /// determinism violation and is left untouched.
    pub fn insert_if_absent(&mut self, key: CacheKey, value: O) -> Result<bool, ShapleyError> {
        match self.entries.get(&key) {
            Some(existing) if *existing == value => Ok(false),
            Some(_) => Err(ShapleyError::NonDeterminismDetected {
                agent: key.agent,
                configuration: key.configuration,
            }),
            None => {
                self.entries.insert(key, value);
                Ok(true)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GhmStats {
    pub agent_executions: u64,
    /// Agent demands across all viable coalitions served by an existing entry.
    pub cache_hits: u64,
    pub unique_configurations: Vec<u64>,
    pub executions_per_layer: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct GhmRun<O> {
    pub cache: MemoCache<O>,
    /// Sink output for each viable coalition, aligned with the input slice.
    pub sink_outputs: Vec<O>,
    pub stats: GhmStats,
    /// Keys in execution order.
    pub executed: Vec<CacheKey>,
    pub key_mode: KeyMode,
}

impl<O: PartialEq> GhmRun<O> {
    /// Output of `agent` as seen by `coalition`, if it was materialized.
    pub fn output_for(&self, graph: &WorkflowGraph, coalition: Coalition, agent: AgentId) -> Option<&O> {
        self.cache.get(&cache_key(graph, self.key_mode, agent, coalition))
    }
}

/// Cache key under which `agent` runs for coalition `coalition`.
fn cache_key(graph: &WorkflowGraph, mode: KeyMode, agent: AgentId, coalition: Coalition) -> CacheKey {
    let upstream = coalition.intersection(graph.earlier_layers(graph.layer_of(agent)));
    let configuration = match mode {
        KeyMode::LayerConfiguration => upstream,
        KeyMode::AncestorRefined => upstream.intersection(graph.ancestors(agent)),
    };
    CacheKey { agent, configuration }
}

/// Materializes every agent output needed by the viable coalitions, layer by
/// layer, executing each unique key once.
///
/// Within a layer the executions are independent and run in parallel;
/// results are inserted in a fixed order so the run is reproducible.
pub fn ghm_execute<E: NodeExecutor>(
    graph: &WorkflowGraph,
    viable: &[Coalition],
    executor: &E,
    episode: &E::Episode,
    options: GhmOptions,
) -> Result<GhmRun<E::Output>, ShapleyError> {
    let mode = options.key_mode;
    let mut cache = MemoCache::default();
    let mut stats = GhmStats::default();
    let mut executed = Vec::new();

    for (layer_idx, layer) in graph.layers().iter().enumerate() {
        let layer_mask = graph.layer_mask(layer_idx);
        // configuration -> agents of this layer active under it
        let mut groups: BTreeMap<Coalition, Coalition> = BTreeMap::new();
        for &s in viable {
            let config = upstream_configuration(graph, s, layer_idx)?;
            let active = groups.entry(config).or_default();
            *active = active.union(s.intersection(layer_mask));
        }
        stats.unique_configurations.push(groups.len() as u64);

        let mut jobs: Vec<(CacheKey, Coalition)> = Vec::new();
        let mut queued = HashSet::new();
        for (&config, &active) in &groups {
            for agent in active {
                debug_assert!(layer.contains(&agent));
                let key = cache_key(graph, mode, agent, config);
                if !cache.contains(&key) && queued.insert(key) {
                    jobs.push((key, config));
                }
            }
        }

        let outputs: Vec<Result<E::Output, ShapleyError>> = jobs
            .par_iter()
            .map(|&(key, config)| {
                let upstream = gather_upstream(graph, mode, &cache, key.agent, config);
                executor
                    .execute(key.agent, &upstream, episode)
                    .map_err(|source| ShapleyError::ExecutorFailure {
                        agent: key.agent,
                        configuration: key.configuration,
                        source,
                    })
            })
            .collect();

        let mut layer_execs = 0u64;
        for ((key, _), out) in jobs.iter().zip(outputs) {
            cache.insert_if_absent(*key, out?)?;
            executed.push(*key);
            layer_execs += 1;
        }
        stats.executions_per_layer.push(layer_execs);
        stats.agent_executions += layer_execs;

        if options.verify_determinism {
            for &(key, config) in &jobs {
                let upstream = gather_upstream(graph, mode, &cache, key.agent, config);
                let again = executor.execute(key.agent, &upstream, episode).map_err(|source| {
                    ShapleyError::ExecutorFailure {
                        agent: key.agent,
                        configuration: key.configuration,
                        source,
                    }
                })?;
                cache.insert_if_absent(key, again)?;
            }
        }
    }

    let mut demands: HashMap<CacheKey, u64> = HashMap::new();
    for &s in viable {
        for agent in s {
            *demands.entry(cache_key(graph, mode, agent, s)).or_default() += 1;
        }
    }
    stats.cache_hits = demands.values().map(|&c| c - 1).sum();

    let sink = graph.sink();
    let sink_outputs = viable
        .iter()
        .map(|&s| {
            cache
                .get(&cache_key(graph, mode, sink, s))
                .cloned()
                .expect("every viable coalition contains the sink")
        })
        .collect();

    Ok(GhmRun {
        cache,
        sink_outputs,
        stats,
        executed,
        key_mode: mode,
    })
}

fn gather_upstream<O: Clone + PartialEq>(
    graph: &WorkflowGraph,
    mode: KeyMode,
    cache: &MemoCache<O>,
    agent: AgentId,
    config: Coalition,
) -> BTreeMap<AgentId, O> {
    graph
        .predecessors(agent)
        .intersection(config)
        .into_iter()
        .map(|p| {
            let key = cache_key(graph, mode, p, config);
            let out = cache
                .get(&key)
                .expect("upstream outputs are materialized by earlier layers");
            (p, out.clone())
        })
        .collect()
}

/// Checks that every executed key was demanded by some viable coalition that
/// contains the agent. Returns the first offending key otherwise.
pub fn audit_executions<O>(graph: &WorkflowGraph, viable: &[Coalition], run: &GhmRun<O>) -> Result<(), CacheKey> {
    let demanded: HashSet<CacheKey> = viable
        .iter()
        .flat_map(|&s| s.into_iter().map(move |a| cache_key(graph, run.key_mode, a, s)))
        .collect();
    match run.executed.iter().find(|k| !demanded.contains(k)) {
        Some(k) => Err(*k),
        None => Ok(()),
    }
}

/// Runs one coalition without memoization: every member executes once in
/// topological order, reading only upstream members of the coalition.
///
/// Returns the sink output (when the sink is a member) and the number of
/// executions performed.
pub fn execute_coalition<E: NodeExecutor>(
    graph: &WorkflowGraph,
    coalition: Coalition,
    executor: &E,
    episode: &E::Episode,
) -> Result<(Option<E::Output>, u64), ShapleyError> {
    let mut outputs: BTreeMap<AgentId, E::Output> = BTreeMap::new();
    let mut executions = 0;
    for &agent in graph.topological_order() {
        if !coalition.contains(agent) {
            continue;
        }
        let upstream: BTreeMap<AgentId, E::Output> = graph
            .predecessors(agent)
            .intersection(coalition)
            .into_iter()
            .map(|p| (p, outputs[&p].clone()))
            .collect();
        let out = executor
            .execute(agent, &upstream, episode)
            .map_err(|source| ShapleyError::ExecutorFailure {
                agent,
                configuration: coalition,
                source,
            })?;
        executions += 1;
        outputs.insert(agent, out);
    }
    Ok((outputs.remove(&graph.sink()), executions))
}
