//! The agent's incrementally built topological map.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::env::{NodeId, Observation, PlanGraph};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeStatus {
    Current,
    Visited,
    Frontier,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapNode {
    pub id: NodeId,
    pub status: NodeStatus,
    /// Panorama-derived for visited/current nodes, mean of partial views
    /// for frontier nodes.
    pub rep: Vec<f64>,
    pub position: [f64; 2],
    /// 0 iff frontier.
    pub last_visit: usize,
    view_sum: Vec<f64>,
    view_count: usize,
}

/// Invariants: exactly one current node once non-empty; visited reps are
/// written once; edges are observed house edges.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TopoMap {
    nodes: Vec<MapNode>,
    #[serde(skip)]
    index: BTreeMap<NodeId, usize>,
    edges: BTreeSet<(NodeId, NodeId)>,
    #[serde(skip)]
    lengths: BTreeMap<(NodeId, NodeId), f64>,
    current: Option<NodeId>,
}

impl TopoMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in insertion order.
    pub fn nodes(&self) -> &[MapNode] {
        &self.nodes
    }

    pub fn position_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&MapNode> {
        self.position_of(id).map(|i| &self.nodes[i])
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current
    }

    pub fn frontier(&self) -> impl Iterator<Item = &MapNode> {
        self.nodes.iter().filter(|n| n.status == NodeStatus::Frontier)
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    /// Known neighbours of `id`, ascending.
    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn plan_graph(&self) -> PlanGraph {
        let mut g = PlanGraph::new();
        for n in &self.nodes {
            g.add_node(n.id);
        }
        for (&(a, b), &l) in &self.lengths {
            g.add_edge(a, b, l);
        }
        g
    }

    fn insert(&mut self, id: NodeId, position: [f64; 2], dim: usize) -> usize {
        let i = self.nodes.len();
        self.nodes.push(MapNode {
            id,
            status: NodeStatus::Frontier,
            rep: vec![0.0; dim],
            position,
            last_visit: 0,
            view_sum: vec![0.0; dim],
            view_count: 0,
        });
        self.index.insert(id, i);
        i
    }

    /// Integrate the observation at step `t` (1-based). `rep` is the fused
    /// panorama representation of the observed node, stored only on its
    /// first visit. `positions` gives each neighbour's coordinates.
    /// Returns whether this was the node's first visit.
    pub fn update(
        &mut self,
        obs: &Observation,
        t: usize,
        rep: &[f64],
        position: [f64; 2],
        neighbor_positions: &[[f64; 2]],
    ) -> Result<bool> {
        if t == 0 {
            return Err(Error::Invariant("map steps are 1-based".into()));
        }
        let dim = rep.len();
        let i = match self.position_of(obs.node) {
            Some(i) => i,
            None if self.nodes.is_empty() => self.insert(obs.node, position, dim),
            None => {
                return Err(Error::Invariant(format!(
                    "observed node {} is not on the map",
                    obs.node
                )))
            }
        };
        if let Some(prev) = self.current {
            let p = self.index[&prev];
            self.nodes[p].status = NodeStatus::Visited;
        }
        let first = self.nodes[i].status == NodeStatus::Frontier;
        let n = &mut self.nodes[i];
        if first {
            n.rep = rep.to_vec();
        }
        n.status = NodeStatus::Current;
        n.last_visit = t;
        self.current = Some(obs.node);
        for (nb, &pos) in obs.neighbors.iter().zip(neighbor_positions) {
            let j = match self.position_of(nb.node) {
                Some(j) => j,
                None => self.insert(nb.node, pos, dim),
            };
            let key = (obs.node.min(nb.node), obs.node.max(nb.node));
            self.edges.insert(key);
            self.lengths.insert(key, nb.distance);
            let m = &mut self.nodes[j];
            if m.status == NodeStatus::Frontier {
                for (s, v) in m.view_sum.iter_mut().zip(&nb.view) {
                    *s += v;
                }
                m.view_count += 1;
                let c = m.view_count as f64;
                m.rep = m.view_sum.iter().map(|s| s / c).collect();
            }
        }
        Ok(first)
    }

    /// Hop distances between map nodes (row/column order = insertion
    /// order); `usize::MAX` when disconnected.
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            let (i, j) = (self.index[&a], self.index[&b]);
            adj[i].push(j);
            adj[j].push(i);
        }
        (0..n)
            .map(|s| {
                let mut d = vec![usize::MAX; n];
                d[s] = 0;
                let mut q = VecDeque::from([s]);
                while let Some(u) = q.pop_front() {
                    for &v in &adj[u] {
                        if d[v] == usize::MAX {
                            d[v] = d[u] + 1;
                            q.push_back(v);
                        }
                    }
                }
                d
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::NeighborView;

    fn obs(node: NodeId, nbs: &[(NodeId, f64)]) -> Observation {
        Observation {
            node,
            panorama: vec![vec![0.0; 2]; 4],
            objects: vec![],
            neighbors: nbs
                .iter()
                .map(|&(n, v)| NeighborView {
                    node: n,
                    view: vec![v, -v],
                    distance: 1.0,
                    heading: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn first_step_adds_current_and_frontier() {
        let mut m = TopoMap::new();
        m.update(&obs(0, &[(1, 1.0), (2, 2.0)]), 1, &[9.0, 9.0], [0.0; 2], &[[1.0, 0.0], [0.0, 1.0]])
            .unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.node(0).unwrap().status, NodeStatus::Current);
        assert_eq!(m.frontier().count(), 2);
        assert!(m.frontier().all(|n| n.last_visit == 0));
    }

    #[test]
    fn frontier_rep_is_mean_of_partial_views() {
        let mut m = TopoMap::new();
        m.update(&obs(0, &[(1, 1.0), (2, 2.0)]), 1, &[0.0, 0.0], [0.0; 2], &[[1.0, 0.0], [0.0, 1.0]])
            .unwrap();
        m.update(&obs(1, &[(0, 0.0), (2, 4.0)]), 2, &[0.0, 0.0], [1.0, 0.0], &[[0.0; 2], [0.0, 1.0]])
            .unwrap();
        assert_eq!(m.node(2).unwrap().rep, vec![3.0, -3.0]);
    }

    #[test]
    fn visited_rep_is_write_once() {
        let mut m = TopoMap::new();
        m.update(&obs(0, &[(1, 1.0)]), 1, &[5.0, 5.0], [0.0; 2], &[[1.0, 0.0]]).unwrap();
        m.update(&obs(1, &[(0, 0.0)]), 2, &[1.0, 1.0], [1.0, 0.0], &[[0.0; 2]]).unwrap();
        let again = m.update(&obs(0, &[(1, 1.0)]), 3, &[7.0, 7.0], [0.0; 2], &[[1.0, 0.0]]).unwrap();
        assert!(!again);
        let n = m.node(0).unwrap();
        assert_eq!(n.rep, vec![5.0, 5.0]);
        assert_eq!(n.last_visit, 3);
        assert_eq!(m.node(1).unwrap().status, NodeStatus::Visited);
    }

    #[test]
    fn unknown_observation_errors() {
        let mut m = TopoMap::new();
        m.update(&obs(0, &[(1, 1.0)]), 1, &[0.0, 0.0], [0.0; 2], &[[1.0, 0.0]]).unwrap();
        assert!(m.update(&obs(7, &[]), 2, &[0.0, 0.0], [0.0; 2], &[]).is_err());
    }
}
