//! Shortest-path planning over full or partially known graphs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use super::house::{HouseGraph, NodeId};
use super::{EnvError, Result};

/// Relative slack for treating two path lengths as equal when breaking ties.
const TIE_EPS: f64 = 1e-9;

/// Undirected weighted graph keyed by house node id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlanGraph {
    adj: BTreeMap<NodeId, Vec<(NodeId, f64)>>,
}

impl PlanGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_house(house: &HouseGraph) -> Self {
        let mut g = Self::new();
        for n in 0..house.len() {
            g.add_node(n);
        }
        for e in &house.edges {
            g.add_edge(e.a, e.b, e.length);
        }
        g
    }

    pub fn add_node(&mut self, n: NodeId) {
        self.adj.entry(n).or_default();
    }

    /// Add an undirected edge (idempotent).
    pub fn add_edge(&mut self, a: NodeId, b: NodeId, length: f64) {
        for (u, v) in [(a, b), (b, a)] {
            let list = self.adj.entry(u).or_default();
            if !list.iter().any(|&(n, _)| n == v) {
                list.push((v, length));
                list.sort_by_key(|&(n, _)| n);
            }
        }
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.adj.contains_key(&n)
    }

    pub fn neighbors(&self, n: NodeId) -> &[(NodeId, f64)] {
        self.adj.get(&n).map_or(&[], Vec::as_slice)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.neighbors(a).iter().find(|&&(n, _)| n == b).map(|&(_, l)| l)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Plan {
    Path { nodes: Vec<NodeId>, length: f64 },
    Unreachable,
}

impl Plan {
    pub fn path(&self) -> Option<&[NodeId]> {
        match self {
            Plan::Path { nodes, .. } => Some(nodes),
            Plan::Unreachable => None,
        }
    }

    pub fn length(&self) -> Option<f64> {
        match self {
            Plan::Path { length, .. } => Some(*length),
            Plan::Unreachable => None,
        }
    }
}

#[derive(PartialEq)]
struct Entry(f64, NodeId);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then on node id
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest distances (unreachable nodes are absent).
pub fn shortest_distances(g: &PlanGraph, source: NodeId) -> BTreeMap<NodeId, f64> {
    let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(source, 0.0);
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if dist.get(&u).is_some_and(|&best| d > best) {
            continue;
        }
        for &(v, w) in g.neighbors(u) {
            let nd = d + w;
            if dist.get(&v).map_or(true, |&cur| nd < cur) {
                dist.insert(v, nd);
                heap.push(Entry(nd, v));
            }
        }
    }
    dist
}

fn on_shortest(d_u: f64, w: f64, d_v: f64) -> bool {
    (w + d_v - d_u).abs() <= TIE_EPS * d_u.max(1.0)
}

/// Minimal-length path from `from` to `to`; among equal-length paths the
/// lexicographically smallest node sequence wins.
pub fn dijkstra_plan(g: &PlanGraph, from: NodeId, to: NodeId) -> Result<Plan> {
    for n in [from, to] {
        if !g.contains(n) {
            return Err(EnvError::UnknownNode(n));
        }
    }
    // distances to the target, then walk greedily on smallest ids
    let to_target = shortest_distances(g, to);
    let Some(&total) = to_target.get(&from) else {
        return Ok(Plan::Unreachable);
    };
    let mut nodes = vec![from];
    let mut length = 0.0;
    let mut cur = from;
    while cur != to {
        let d_cur = to_target[&cur];
        let next = g
            .neighbors(cur)
            .iter()
            .filter(|&&(v, w)| to_target.get(&v).is_some_and(|&d_v| on_shortest(d_cur, w, d_v)))
            .map(|&(v, w)| (v, w))
            .next()
            .ok_or_else(|| EnvError::Corrupt(format!("no shortest-path successor at {cur}")))?;
        length += next.1;
        cur = next.0;
        nodes.push(cur);
        if nodes.len() > g.len() + 1 {
            return Err(EnvError::Corrupt("planner cycle".into()));
        }
    }
    debug_assert!((length - total).abs() <= TIE_EPS * total.max(1.0));
    Ok(Plan::Path { nodes, length })
}

/// Neighbour of `current` on a shortest path to `goal`, smallest id on ties.
pub fn teacher_next(house: &HouseGraph, current: NodeId, goal: NodeId) -> Result<NodeId> {
    let dist = house_distances(house, goal);
    teacher_next_with(house, current, goal, &dist)
}

/// [`teacher_next`] with precomputed distances-to-goal (indexed by node).
pub fn teacher_next_with(
    house: &HouseGraph,
    current: NodeId,
    goal: NodeId,
    dist_to_goal: &[f64],
) -> Result<NodeId> {
    house.node(current)?;
    house.node(goal)?;
    if current == goal {
        return Err(EnvError::Corrupt("teacher_next called at the goal".into()));
    }
    if !dist_to_goal[current].is_finite() {
        return Err(EnvError::Unreachable { from: current, to: goal });
    }
    let best = house
        .neighbors(current)
        .iter()
        .map(|&(v, w)| (v, w + dist_to_goal[v]))
        .fold(None::<(NodeId, f64)>, |acc, (v, c)| match acc {
            Some((_, bc)) if c >= bc - TIE_EPS * bc.max(1.0) => acc,
            _ => Some((v, c)),
        });
    best.map(|(v, _)| v)
        .ok_or(EnvError::Unreachable { from: current, to: goal })
}

/// Shortest distances from every node to `target` (∞ if unreachable).
pub fn house_distances(house: &HouseGraph, target: NodeId) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; house.len()];
    let mut heap = BinaryHeap::new();
    dist[target] = 0.0;
    heap.push(Entry(0.0, target));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in house.neighbors(u) {
            if d + w < dist[v] {
                dist[v] = d + w;
                heap.push(Entry(d + w, v));
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_plan() {
        let mut g = PlanGraph::new();
        g.add_edge(0, 1, 1.0);
        let p = dijkstra_plan(&g, 0, 0).unwrap();
        assert_eq!(p, Plan::Path { nodes: vec![0], length: 0.0 });
    }

    #[test]
    fn two_hops_beat_long_edge() {
        let mut g = PlanGraph::new();
        g.add_edge(0, 1, 1.0);
        g.add_edge(1, 2, 1.0);
        g.add_edge(0, 2, 3.0);
        let p = dijkstra_plan(&g, 0, 2).unwrap();
        assert_eq!(p.path().unwrap(), &[0, 1, 2]);
        assert_eq!(p.length().unwrap(), 2.0);
    }

    #[test]
    fn ties_pick_smallest_sequence() {
        // square 0-1-3 and 0-2-3, equal lengths
        let mut g = PlanGraph::new();
        g.add_edge(0, 2, 1.0);
        g.add_edge(2, 3, 1.0);
        g.add_edge(0, 1, 1.0);
        g.add_edge(1, 3, 1.0);
        assert_eq!(dijkstra_plan(&g, 0, 3).unwrap().path().unwrap(), &[0, 1, 3]);
    }

    #[test]
    fn unreachable_is_explicit() {
        let mut g = PlanGraph::new();
        g.add_edge(0, 1, 1.0);
        g.add_node(5);
        assert_eq!(dijkstra_plan(&g, 0, 5).unwrap(), Plan::Unreachable);
        assert!(matches!(dijkstra_plan(&g, 0, 9), Err(EnvError::UnknownNode(9))));
    }
}
