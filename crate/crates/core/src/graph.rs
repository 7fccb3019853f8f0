//! The layered agent DAG: construction, validation and structural queries.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coalition::{Coalition, MAX_AGENTS};

/// Dense agent index, `0..N`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(u16);

impl AgentId {
    pub fn new(index: usize) -> Self {
        AgentId(u16::try_from(index).expect("agent index fits u16"))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph has no agents")]
    EmptyGraph,
    #[error("graph has {0} agents; at most {MAX_AGENTS} are supported")]
    TooManyAgents(usize),
    #[error("duplicate agent name `{0}`")]
    DuplicateName(String),
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("cycle detected through agent `{0}`")]
    CycleDetected(String),
    #[error("multiple sinks: {0:?}")]
    MultipleSinks(Vec<String>),
    #[error("graph has no source agent")]
    NoSource,
    #[error("edge `{from}` -> `{to}` does not point to a strictly later layer")]
    CrossLayerViolation { from: String, to: String },
    #[error("invalid layer partition: {0}")]
    LayerPartitionInvalid(String),
    #[error("agent `{0}` is not a member of the coalition")]
    AgentNotInCoalition(String),
    #[error("path endpoint `{0}` is not a member of the coalition")]
    EndpointNotInCoalition(String),
    #[error("failed to read graph file: {0}")]
    Io(String),
    #[error("failed to parse graph file: {0}")]
    Parse(String),
}

/// A validated layered DAG of agents.
///
/// Sources and the sink are derived from degrees at construction time. The
/// graph is immutable afterwards and cheap to share between threads.
#[derive(Debug, Clone)]
pub struct WorkflowGraph {
    names: Vec<String>,
    index: HashMap<String, AgentId>,
    layers: Vec<Vec<AgentId>>,
    layer_masks: Vec<Coalition>,
    layer_of: Vec<usize>,
    mandatory: Vec<bool>,
    edges: Vec<(AgentId, AgentId)>,
    preds: Vec<Coalition>,
    succs: Vec<Coalition>,
    ancestors: Vec<Coalition>,
    sources: Coalition,
    sink: AgentId,
    topo: Vec<AgentId>,
}

impl WorkflowGraph {
    /// Builds and validates a graph from agent names, index-pair edges, an
    /// ordered layer partition and per-layer mandatory flags.
    pub fn build(
        names: Vec<String>,
        edges: &[(usize, usize)],
        layers: Vec<Vec<usize>>,
        mandatory: Vec<bool>,
    ) -> Result<Self, GraphError> {
        let n = names.len();
        if n == 0 {
            return Err(GraphError::EmptyGraph);
        }
        if n > MAX_AGENTS {
            return Err(GraphError::TooManyAgents(n));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), AgentId::new(i)).is_some() {
                return Err(GraphError::DuplicateName(name.clone()));
            }
        }
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));

        if layers.is_empty() {
            return Err(GraphError::LayerPartitionInvalid("no layers declared".into()));
        }
        if mandatory.len() != layers.len() {
            return Err(GraphError::LayerPartitionInvalid(format!(
                "{} mandatory flags for {} layers",
                mandatory.len(),
                layers.len()
            )));
        }
        let mut layer_of = vec![usize::MAX; n];
        for (li, layer) in layers.iter().enumerate() {
            if layer.is_empty() {
                return Err(GraphError::LayerPartitionInvalid(format!("layer {} is empty", li + 1)));
            }
            for &a in layer {
                if a >= n {
                    return Err(GraphError::UnknownAgent(label(a)));
                }
                if layer_of[a] != usize::MAX {
                    return Err(GraphError::LayerPartitionInvalid(format!(
                        "agent `{}` assigned to more than one layer",
                        names[a]
                    )));
                }
                layer_of[a] = li;
            }
        }
        if let Some(a) = layer_of.iter().position(|&l| l == usize::MAX) {
            return Err(GraphError::LayerPartitionInvalid(format!(
                "agent `{}` is not assigned to a layer",
                names[a]
            )));
        }

        let mut edge_set = BTreeSet::new();
        for &(from, to) in edges {
            if from >= n {
                return Err(GraphError::UnknownAgent(label(from)));
            }
            if to >= n {
                return Err(GraphError::UnknownAgent(label(to)));
            }
            edge_set.insert((AgentId::new(from), AgentId::new(to)));
        }
        let edges: Vec<(AgentId, AgentId)> = edge_set.into_iter().collect();
        let mut preds = vec![Coalition::EMPTY; n];
        let mut succs = vec![Coalition::EMPTY; n];
        for &(from, to) in &edges {
            preds[to.index()] = preds[to.index()].with(from);
            succs[from.index()] = succs[from.index()].with(to);
        }

        let topo = kahn_order(n, &preds, &succs).map_err(|a| GraphError::CycleDetected(names[a].clone()))?;

        for &(from, to) in &edges {
            if layer_of[from.index()] >= layer_of[to.index()] {
                return Err(GraphError::CrossLayerViolation {
                    from: names[from.index()].clone(),
                    to: names[to.index()].clone(),
                });
            }
        }

        let sources: Coalition = (0..n).filter(|&i| preds[i].is_empty()).map(AgentId::new).collect();
        let sinks: Vec<AgentId> = (0..n).filter(|&i| succs[i].is_empty()).map(AgentId::new).collect();
        if sources.is_empty() {
            return Err(GraphError::NoSource);
        }
        if sinks.len() != 1 {
            return Err(GraphError::MultipleSinks(
                sinks.iter().map(|a| names[a.index()].clone()).collect(),
            ));
        }

        let mut ancestors = vec![Coalition::EMPTY; n];
        for &a in &topo {
            let mut anc = preds[a.index()];
            for p in preds[a.index()] {
                anc = anc.union(ancestors[p.index()]);
            }
            ancestors[a.index()] = anc;
        }

        let layers: Vec<Vec<AgentId>> = layers
            .into_iter()
            .map(|l| {
                let mut l: Vec<AgentId> = l.into_iter().map(AgentId::new).collect();
                l.sort();
                l
            })
            .collect();
        let layer_masks = layers
            .iter()
            .map(|l| Coalition::from_agents(l.iter().copied()))
            .collect();

        Ok(WorkflowGraph {
            names,
            index,
            layers,
            layer_masks,
            layer_of,
            mandatory,
            edges,
            preds,
            succs,
            ancestors,
            sources,
            sink: sinks[0],
            topo,
        })
    }

    /// Builds a graph whose agents are declared layer by layer, with edges
    /// given as name pairs. Agent indices follow declaration order.
    pub fn from_named(layers: &[(&[&str], bool)], edges: &[(&str, &str)]) -> Result<Self, GraphError> {
        let mut names = Vec::new();
        let mut partition = Vec::new();
        let mut flags = Vec::new();
        for (members, mandatory) in layers {
            let mut layer = Vec::new();
            for name in members.iter() {
                layer.push(names.len());
                names.push((*name).to_string());
            }
            partition.push(layer);
            flags.push(*mandatory);
        }
        let lookup: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut idx_edges = Vec::with_capacity(edges.len());
        for (from, to) in edges {
            let f = *lookup
                .get(from)
                .ok_or_else(|| GraphError::UnknownAgent((*from).into()))?;
            let t = *lookup.get(to).ok_or_else(|| GraphError::UnknownAgent((*to).into()))?;
            idx_edges.push((f, t));
        }
        WorkflowGraph::build(names, &idx_edges, partition, flags)
    }

    /// Layered graph with complete bipartite edges between consecutive layers
    /// and every layer mandatory. Agents are named `L{layer}A{k}`, except the
    /// final single-agent layer whose agent is `SINK`.
    pub fn fully_connected(layer_sizes: &[usize]) -> Result<Self, GraphError> {
        let mut names = Vec::new();
        let mut layers = Vec::new();
        for (li, &size) in layer_sizes.iter().enumerate() {
            let mut layer = Vec::new();
            for k in 0..size {
                layer.push(names.len());
                if li + 1 == layer_sizes.len() && size == 1 {
                    names.push("SINK".to_string());
                } else {
                    names.push(format!("L{}A{}", li + 1, k + 1));
                }
            }
            layers.push(layer);
        }
        let mut edges = Vec::new();
        for pair in layers.windows(2) {
            for &from in &pair[0] {
                for &to in &pair[1] {
                    edges.push((from, to));
                }
            }
        }
        let flags = vec![true; layers.len()];
        WorkflowGraph::build(names, &edges, layers, flags)
    }

    /// The seven-agent trading workflow: three analysts, three outlook
    /// agents and one trader, fully connected between consecutive layers.
    pub fn reference() -> Self {
        let analysts = ["NAA", "TAA", "FAA"];
        let outlooks = ["BOA", "BeOA", "NOA"];
        let mut edges = Vec::new();
        for a in analysts {
            for o in outlooks {
                edges.push((a, o));
            }
        }
        for o in outlooks {
            edges.push((o, "TRA"));
        }
        WorkflowGraph::from_named(&[(&analysts, true), (&outlooks, true), (&["TRA"], true)], &edges)
            .expect("reference topology is valid")
    }

    pub fn agent_count(&self) -> usize {
        self.names.len()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        (0..self.names.len()).map(AgentId::new)
    }

    pub fn all(&self) -> Coalition {
        Coalition::full(self.names.len())
    }

    pub fn name(&self, agent: AgentId) -> &str {
        &self.names[agent.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn agent(&self, name: &str) -> Option<AgentId> {
        self.index.get(name).copied()
    }

    pub fn layers(&self) -> &[Vec<AgentId>] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn layer_mask(&self, layer: usize) -> Coalition {
        self.layer_masks[layer]
    }

    /// Zero-based layer position of `agent`.
    pub fn layer_of(&self, agent: AgentId) -> usize {
        self.layer_of[agent.index()]
    }

    pub fn mandatory_flags(&self) -> &[bool] {
        &self.mandatory
    }

    /// All agents in layers strictly before `layer`.
    pub fn earlier_layers(&self, layer: usize) -> Coalition {
        self.layer_masks[..layer.min(self.layer_masks.len())]
            .iter()
            .fold(Coalition::EMPTY, |acc, &m| acc.union(m))
    }

    pub fn edges(&self) -> &[(AgentId, AgentId)] {
        &self.edges
    }

    pub fn predecessors(&self, agent: AgentId) -> Coalition {
        self.preds[agent.index()]
    }

    pub fn successors(&self, agent: AgentId) -> Coalition {
        self.succs[agent.index()]
    }

    /// Transitive predecessors of `agent`.
    pub fn ancestors(&self, agent: AgentId) -> Coalition {
        self.ancestors[agent.index()]
    }

    pub fn sources(&self) -> Coalition {
        self.sources
    }

    pub fn is_source(&self, agent: AgentId) -> bool {
        self.sources.contains(agent)
    }

    pub fn sink(&self) -> AgentId {
        self.sink
    }

    /// Topological order with ties broken by ascending agent index.
    pub fn topological_order(&self) -> &[AgentId] {
        &self.topo
    }

    /// Direct predecessors of `agent` that belong to `coalition`.
    pub fn information_set(&self, agent: AgentId, coalition: Coalition) -> Result<Coalition, GraphError> {
        if !coalition.contains(agent) {
            return Err(GraphError::AgentNotInCoalition(self.name(agent).to_string()));
        }
        Ok(self.preds[agent.index()].intersection(coalition))
    }

    /// Whether a directed path `from -> to` exists using only coalition members.
    pub fn path_exists(&self, coalition: Coalition, from: AgentId, to: AgentId) -> Result<bool, GraphError> {
        for end in [from, to] {
            if !coalition.contains(end) {
                return Err(GraphError::EndpointNotInCoalition(self.name(end).to_string()));
            }
        }
        Ok(self
            .reachable_within(coalition, Coalition::singleton(from))
            .contains(to))
    }

    /// Members of `coalition` reachable from `start` (inclusive) in the
    /// subgraph induced by `coalition`.
    pub fn reachable_within(&self, coalition: Coalition, start: Coalition) -> Coalition {
        let mut seen = start.intersection(coalition);
        // topological order makes a single forward pass sufficient
        for &a in &self.topo {
            if seen.contains(a) {
                seen = seen.union(self.succs[a.index()].intersection(coalition));
            }
        }
        seen
    }
}

/// Kahn's algorithm with a min-heap; returns an agent on a cycle on failure.
fn kahn_order(n: usize, preds: &[Coalition], succs: &[Coalition]) -> Result<Vec<AgentId>, usize> {
    let mut indeg: Vec<usize> = preds.iter().map(|p| p.len()).collect();
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(AgentId::new(i));
        for s in succs[i] {
            indeg[s.index()] -= 1;
            if indeg[s.index()] == 0 {
                ready.push(Reverse(s.index()));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err((0..n).find(|&i| indeg[i] > 0).unwrap_or(0))
    }
}

/// On-disk graph definition (TOML).
///
/// ```toml
/// edges = [["NAA", "TRA"], ["TAA", "TRA"], ["FAA", "TRA"]]
///
/// [[layers]]
/// agents = ["NAA", "TAA", "FAA"]
/// mandatory = true
///
/// [[layers]]
/// agents = ["TRA"]
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDef {
    pub layers: Vec<LayerDef>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDef {
    pub agents: Vec<String>,
    #[serde(default = "default_mandatory")]
    pub mandatory: bool,
}

fn default_mandatory() -> bool {
    true
}

impl GraphDef {
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        toml::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path).map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn from_graph(graph: &WorkflowGraph) -> Self {
        GraphDef {
            layers: graph
                .layers()
                .iter()
                .zip(graph.mandatory_flags())
                .map(|(l, &m)| LayerDef {
                    agents: l.iter().map(|&a| graph.name(a).to_string()).collect(),
                    mandatory: m,
                })
                .collect(),
            edges: graph
                .edges()
                .iter()
                .map(|&(f, t)| (graph.name(f).to_string(), graph.name(t).to_string()))
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("graph definition serializes")
    }

    pub fn into_graph(self) -> Result<WorkflowGraph, GraphError> {
        let layers: Vec<(Vec<&str>, bool)> = self
            .layers
            .iter()
            .map(|l| (l.agents.iter().map(String::as_str).collect(), l.mandatory))
            .collect();
        let layer_refs: Vec<(&[&str], bool)> = layers.iter().map(|(a, m)| (a.as_slice(), *m)).collect();
        let edges: Vec<(&str, &str)> = self.edges.iter().map(|(f, t)| (f.as_str(), t.as_str())).collect();
        WorkflowGraph::from_named(&layer_refs, &edges)
    }
}

pub fn load_graph(path: &Path) -> Result<WorkflowGraph, GraphError> {
    GraphDef::load(path)?.into_graph()
}
