#![allow(dead_code)]

use std::collections::BTreeMap;

use coalcredit::coalition::Coalition;
use coalcredit::graph::{AgentId, WorkflowGraph};
use coalcredit::shapley::{BoxError, NodeExecutor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random layered DAG with `n` agents and a single sink layer. Every
/// non-source draws at least one predecessor from the previous layer and
/// every non-sink feeds at least one later agent.
pub fn random_layered_graph(n: usize, seed: u64) -> WorkflowGraph {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(2..=n.min(4));
    let mut sizes = vec![1; depth];
    for _ in 0..n - depth {
        let l = rng.gen_range(0..depth - 1);
        sizes[l] += 1;
    }
    let mut layers = Vec::new();
    let mut next = 0;
    for &s in &sizes {
        layers.push((next..next + s).collect::<Vec<usize>>());
        next += s;
    }
    let mut edges = Vec::new();
    for l in 1..depth {
        let earlier: Vec<usize> = layers[..l].concat();
        for &to in &layers[l] {
            let &must = layers[l - 1].choose(&mut rng).unwrap();
            edges.push((must, to));
            for &from in &earlier {
                if from != must && rng.gen_bool(0.35) {
                    edges.push((from, to));
                }
            }
        }
    }
    for l in 0..depth - 1 {
        let later: Vec<usize> = layers[l + 1..].concat();
        for &from in &layers[l] {
            if !edges.iter().any(|&(f, _)| f == from) {
                edges.push((from, *later.choose(&mut rng).unwrap()));
            }
        }
    }
    let names = (0..n).map(|i| format!("N{i}")).collect();
    let mandatory = (0..depth).map(|_| rng.gen_bool(0.7)).collect();
    WorkflowGraph::build(names, &edges, layers, mandatory).expect("generated graph is valid")
}

/// Agents that blend their inputs through fixed random weights. Sources read
/// the episode.
pub struct LinearMock {
    pub seed: u64,
    pub sources: Coalition,
}

impl LinearMock {
    pub fn new(graph: &WorkflowGraph, seed: u64) -> Self {
        LinearMock {
            seed,
            sources: graph.sources(),
        }
    }
}

fn unit(seed: u64, a: u64, b: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0x9E37_79B9) ^ b.wrapping_mul(0x85EB_CA6B));
    rng.gen_range(-1.0..1.0)
}

impl NodeExecutor for LinearMock {
    type Output = f64;
    type Episode = u64;

    fn execute(&self, agent: AgentId, upstream: &BTreeMap<AgentId, f64>, episode: &u64) -> Result<f64, BoxError> {
        let a = agent.index() as u64;
        if self.sources.contains(agent) {
            return Ok(unit(self.seed, a, 1000 + episode));
        }
        let mixed: f64 = upstream
            .iter()
            .map(|(p, x)| unit(self.seed, a, p.index() as u64) * x)
            .sum();
        Ok((mixed + 0.1 * unit(self.seed, a, 500)).tanh())
    }
}
