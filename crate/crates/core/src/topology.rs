//! Communication overlay: small-world generation, rebuild after exclusion
//! and connectivity checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AgentId;
use crate::rng::{self, Stream};

/// Undirected neighbour graph over agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TopologyWire", try_from = "TopologyWire")]
pub struct Topology {
    nodes: BTreeSet<AgentId>,
    adjacency: BTreeMap<AgentId, BTreeSet<AgentId>>,
    pub generation: u64,
    pub k: usize,
    pub rewire_probability: f64,
    pub seed: u64,
}

/// Edge-list form used in scenario and trace exports.
#[derive(Serialize, Deserialize)]
struct TopologyWire {
    generation: u64,
    k: usize,
    rewire_probability: f64,
    seed: u64,
    nodes: Vec<AgentId>,
    edges: Vec<(AgentId, AgentId)>,
}

impl From<Topology> for TopologyWire {
    fn from(t: Topology) -> Self {
        TopologyWire {
            generation: t.generation,
            k: t.k,
            rewire_probability: t.rewire_probability,
            seed: t.seed,
            nodes: t.nodes.iter().copied().collect(),
            edges: t.edges(),
        }
    }
}

impl TryFrom<TopologyWire> for Topology {
    type Error = Error;

    fn try_from(w: TopologyWire) -> Result<Self> {
        let mut t = Topology::empty(w.nodes.iter().copied(), w.k, w.rewire_probability, w.seed);
        t.generation = w.generation;
        for (a, b) in w.edges {
            if a == b || !t.nodes.contains(&a) || !t.nodes.contains(&b) {
                return Err(Error::Parse(format!("bad edge {a}-{b}")));
            }
            t.connect(a, b);
        }
        Ok(t)
    }
}

impl Topology {
    fn empty(nodes: impl IntoIterator<Item = AgentId>, k: usize, p: f64, seed: u64) -> Self {
        let nodes: BTreeSet<AgentId> = nodes.into_iter().collect();
        let adjacency = nodes.iter().map(|n| (*n, BTreeSet::new())).collect();
        Topology {
            nodes,
            adjacency,
            generation: 0,
            k,
            rewire_probability: p,
            seed,
        }
    }

    /// Builds a topology from explicit edges; used for hand-made overlays.
    pub fn from_edges(
        nodes: impl IntoIterator<Item = AgentId>,
        edges: impl IntoIterator<Item = (AgentId, AgentId)>,
    ) -> Result<Self> {
        let mut t = Topology::empty(nodes, 2, 0.0, 0);
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidArgument(format!("self-loop at {a}")));
            }
            if !t.nodes.contains(&a) || !t.nodes.contains(&b) {
                return Err(Error::InvalidArgument(format!("edge {a}-{b} leaves the node set")));
            }
            t.connect(a, b);
        }
        Ok(t)
    }

    /// Ring over `n` agents `A0..A{n-1}`.
    pub fn ring(n: u32) -> Self {
        let ids: Vec<AgentId> = (0..n).map(AgentId).collect();
        let edges = (0..n).filter(|_| n > 1).map(|i| (AgentId(i), AgentId((i + 1) % n)));
        let edges: Vec<_> = edges.filter(|(a, b)| a != b).collect();
        Topology::from_edges(ids, edges).expect("ring is well formed")
    }

    pub fn nodes(&self) -> &BTreeSet<AgentId> {
        &self.nodes
    }

    pub fn contains(&self, a: AgentId) -> bool {
        self.nodes.contains(&a)
    }

    pub fn neighbors(&self, a: AgentId) -> BTreeSet<AgentId> {
        self.adjacency.get(&a).cloned().unwrap_or_default()
    }

    pub fn degree(&self, a: AgentId) -> usize {
        self.adjacency.get(&a).map_or(0, BTreeSet::len)
    }

    pub fn has_edge(&self, a: AgentId, b: AgentId) -> bool {
        self.adjacency.get(&a).is_some_and(|s| s.contains(&b))
    }

    /// Each undirected edge once, as `(smaller, larger)`.
    pub fn edges(&self) -> Vec<(AgentId, AgentId)> {
        self.adjacency
            .iter()
            .flat_map(|(a, ns)| ns.iter().filter(move |b| a < *b).map(move |b| (*a, *b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn remove_edge(&mut self, a: AgentId, b: AgentId) {
        if let Some(s) = self.adjacency.get_mut(&a) {
            s.remove(&b);
        }
        if let Some(s) = self.adjacency.get_mut(&b) {
            s.remove(&a);
        }
    }

    /// Drops nodes and their edges without regenerating anything.
    pub fn without_nodes(&self, removed: &BTreeSet<AgentId>) -> Topology {
        let mut t = self.clone();
        for r in removed {
            t.nodes.remove(r);
            t.adjacency.remove(r);
        }
        for ns in t.adjacency.values_mut() {
            ns.retain(|n| !removed.contains(n));
        }
        t
    }

    fn connect(&mut self, a: AgentId, b: AgentId) {
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
    }

    /// Symmetric, loop-free adjacency over exactly the node set.
    pub fn is_well_formed(&self) -> bool {
        self.adjacency.keys().copied().collect::<BTreeSet<_>>() == self.nodes
            && self.adjacency.iter().all(|(a, ns)| {
                !ns.contains(a) && ns.iter().all(|b| self.nodes.contains(b) && self.has_edge(*b, *a))
            })
    }
}

/// True iff a traversal from any node reaches every node.
pub fn is_connected(t: &Topology) -> Result<bool> {
    let Some(&start) = t.nodes.iter().next() else {
        return Err(Error::InvalidArgument("topology has no nodes".into()));
    };
    Ok(reachable(t, start).len() == t.nodes.len())
}

fn reachable(t: &Topology, start: AgentId) -> BTreeSet<AgentId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for m in t.adjacency.get(&n).into_iter().flatten() {
            if seen.insert(*m) {
                queue.push_back(*m);
            }
        }
    }
    seen
}

/// Watts–Strogatz style overlay: ring lattice of degree `k`, each lattice
/// edge rewired with probability `p`. Draws that would duplicate an edge or
/// disconnect the graph are redrawn.
pub fn build_small_world(nodes: &[AgentId], k: usize, p: f64, seed: u64) -> Result<Topology> {
    let set: BTreeSet<AgentId> = nodes.iter().copied().collect();
    if set.len() != nodes.len() {
        return Err(Error::InvalidArgument("duplicate node ids".into()));
    }
    if k < 2 || !k.is_multiple_of(2) || k >= set.len() {
        return Err(Error::InvalidArgument(format!(
            "k must be even with 2 <= k < {}, got {k}",
            set.len()
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("rewire probability {p} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, Stream::Topology);
    Ok(lattice_rewired(&set, k, p, seed, &mut rng))
}

const MAX_REDRAWS: usize = 32;

fn lattice_rewired(nodes: &BTreeSet<AgentId>, k: usize, p: f64, seed: u64, rng: &mut impl Rng) -> Topology {
    let order: Vec<AgentId> = nodes.iter().copied().collect();
    let n = order.len();
    let mut t = Topology::empty(order.iter().copied(), k, p, seed);
    if n < 2 {
        return t;
    }
    let half = (k / 2).min((n - 1) / 2).max(1);
    for i in 0..n {
        for j in 1..=half {
            t.connect(order[i], order[(i + j) % n]);
        }
    }
    if n <= 3 {
        return t;
    }
    for j in 1..=half {
        for i in 0..n {
            let a = order[i];
            let b = order[(i + j) % n];
            if !t.has_edge(a, b) || !rng.gen_bool(p) {
                continue;
            }
            for _ in 0..MAX_REDRAWS {
                let c = order[rng.gen_range(0..n)];
                if c == a || t.has_edge(a, c) {
                    continue;
                }
                t.remove_edge(a, b);
                t.connect(a, c);
                if reachable(&t, a).len() == n {
                    break;
                }
                t.remove_edge(a, c);
                t.connect(a, b);
            }
        }
    }
    t
}

/// Regenerates the overlay over the surviving nodes with the same
/// parameters. The RNG stream is keyed by the new generation and the
/// excluded set, so the result depends only on those and the old topology.
pub fn rebuild_excluding(old: &Topology, excluded: &BTreeSet<AgentId>) -> Result<Topology> {
    let survivors: BTreeSet<AgentId> = old.nodes.difference(excluded).copied().collect();
    if survivors.len() < 2 {
        return Err(Error::DegradedSystem(format!(
            "only {} agent(s) would remain",
            survivors.len()
        )));
    }
    let max_even = (survivors.len() - 1) / 2 * 2;
    let k = old.k.min(max_even).max(2);
    let generation = old.generation + 1;
    let key = excluded
        .iter()
        .fold(generation, |acc, a| acc.wrapping_mul(1_000_003).wrapping_add(u64::from(a.0) + 1));
    let mut rng = rng::keyed_stream(old.seed, Stream::Rebuild, key);
    let mut t = lattice_rewired(&survivors, k, old.rewire_probability, old.seed, &mut rng);
    t.k = old.k;
    t.generation = generation;
    Ok(t)
}
