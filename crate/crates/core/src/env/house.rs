use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};

use super::world::{Prototypes, TransitionPrior, OBJECT_NAMES, ROOM_NAMES, TYPICAL_OBJECTS};
use super::{EnvError, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    ValSeen,
    ValUnseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValSeen => "val-seen",
            Split::ValUnseen => "val-unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val-seen" | "val_seen" => Some(Split::ValSeen),
            "val-unseen" | "val_unseen" => Some(Split::ValUnseen),
            _ => None,
        }
    }
}

/// Generator settings. Everything downstream is a pure function of this
/// plus a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_room_types: usize,
    pub num_object_classes: usize,
    pub sectors: usize,
    pub feature_dim: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_degree: usize,
    pub min_room_size: usize,
    pub max_room_size: usize,
    /// Grid pitch between neighbouring viewpoints, meters.
    pub spacing: f64,
    /// Uniform positional jitter per axis, meters.
    pub jitter: f64,
    /// Probability of closing a loop between grid-adjacent cells of a room.
    pub loop_prob: f64,
    pub view_noise: f64,
    pub object_noise: f64,
    /// Weight of the neighbouring room in a view that looks through a door.
    pub door_blend: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Chance an object is drawn from its room's high-frequency set.
    pub typical_object_prob: f64,
    pub prototype_seed: u64,
    pub transitions: TransitionPrior,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_room_types: 8,
            num_object_classes: 16,
            sectors: 4,
            feature_dim: 32,
            min_nodes: 12,
            max_nodes: 30,
            max_degree: 4,
            min_room_size: 2,
            max_room_size: 4,
            spacing: 3.2,
            jitter: 0.4,
            loop_prob: 0.5,
            view_noise: 0.1,
            object_noise: 0.1,
            door_blend: 0.5,
            min_objects: 1,
            max_objects: 3,
            typical_object_prob: 0.8,
            prototype_seed: 7,
            transitions: TransitionPrior::default_prior(8),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.num_room_types == 0 || self.num_room_types > ROOM_NAMES.len() {
            return bad("num_room_types must be in 1..=8");
        }
        if self.num_object_classes == 0 || self.num_object_classes > OBJECT_NAMES.len() {
            return bad("num_object_classes must be in 1..=16");
        }
        if self.sectors == 0 || self.feature_dim == 0 {
            return bad("sectors and feature_dim must be positive");
        }
        if self.min_nodes < 2 || self.min_nodes > self.max_nodes {
            return bad("node range must satisfy 2 <= min <= max");
        }
        if self.max_degree < 2 || self.max_degree > 4 {
            return bad("max_degree must be in 2..=4 on the grid layout");
        }
        if self.min_room_size == 0 || self.min_room_size > self.max_room_size {
            return bad("room size range invalid");
        }
        if self.jitter < 0.0 || self.jitter * 2.0 >= self.spacing {
            return bad("jitter must be below half the spacing");
        }
        if self.min_objects > self.max_objects || self.max_objects > self.num_object_classes {
            return bad("object count range invalid");
        }
        self.transitions.validate(self.num_room_types)
    }

    pub fn prototypes(&self) -> Prototypes {
        Prototypes::generate(
            self.num_room_types,
            self.num_object_classes,
            self.feature_dim,
            self.prototype_seed,
        )
    }

    /// High-frequency object classes of a room type, restricted to the
    /// configured object range.
    pub fn typical_objects(&self, room: usize) -> Vec<usize> {
        TYPICAL_OBJECTS[room]
            .iter()
            .copied()
            .filter(|&o| o < self.num_object_classes)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class: usize,
    pub feature: Vec<f64>,
    pub sector: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavNode {
    pub id: NodeId,
    pub position: [f64; 2],
    pub room_type: usize,
    pub room: usize,
    /// One feature vector per heading sector; sector `k` is centred on
    /// heading `k·2π/D` (sector 0 faces east).
    pub views: Vec<Vec<f64>>,
    pub objects: Vec<ObjectInstance>,
}

/// A room and the door it was entered through while growing the house.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub room_type: usize,
    pub parent: Option<usize>,
    pub nodes: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HouseGraph {
    pub id: String,
    pub split: Split,
    pub transition_id: String,
    pub nodes: Vec<NavNode>,
    pub edges: Vec<Edge>,
    pub rooms: Vec<Room>,
    #[serde(skip)]
    adjacency: Vec<Vec<(NodeId, f64)>>,
}

impl HouseGraph {
    pub fn new(
        id: String,
        split: Split,
        transition_id: String,
        nodes: Vec<NavNode>,
        edges: Vec<Edge>,
        rooms: Vec<Room>,
    ) -> Self {
        let mut h = Self {
            id,
            split,
            transition_id,
            nodes,
            edges,
            rooms,
            adjacency: Vec::new(),
        };
        h.rebuild_adjacency();
        h
    }

    /// Recompute the neighbour lists (needed after deserialization).
    pub fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.a].push((e.b, e.length));
            adj[e.b].push((e.a, e.length));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
        }
        self.adjacency = adj;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&NavNode> {
        self.nodes.get(id).ok_or(EnvError::UnknownNode(id))
    }

    /// Neighbours sorted by node id, with edge lengths.
    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, f64)] {
        &self.adjacency[id]
    }

    pub fn edge_length(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|&&(n, _)| n == b)
            .map(|&(_, l)| l)
    }

    pub fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        let (p, q) = (self.nodes[a].position, self.nodes[b].position);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adjacency[id].len()
    }

    pub fn sectors(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.views.len())
    }

    /// Check the structural invariants: connectivity, degree bounds, edge
    /// lengths, unique positions, view counts, object sectors.
    pub fn validate(&self, max_degree: usize) -> Result<()> {
        let bad = |m: String| Err(EnvError::Corrupt(format!("house {}: {m}", self.id)));
        let n = self.nodes.len();
        if n == 0 {
            return bad("no nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return bad(format!("node {i} has id {}", node.id));
            }
            let deg = self.degree(i);
            if n > 1 && (deg == 0 || deg > max_degree) {
                return bad(format!("node {i} has degree {deg}"));
            }
            if node.views.len() != self.sectors() {
                return bad(format!("node {i} has {} views", node.views.len()));
            }
            if node.objects.iter().any(|o| o.sector >= node.views.len()) {
                return bad(format!("node {i} has an object in an invalid sector"));
            }
        }
        for e in &self.edges {
            if (e.length - self.distance(e.a, e.b)).abs() > 1e-12 {
                return bad(format!("edge {}-{} length mismatch", e.a, e.b));
            }
        }
        let mut positions: Vec<_> = self.nodes.iter().map(|n| n.position).collect();
        positions.sort_by(|a, b| a.partial_cmp(b).expect("finite positions"));
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate positions".into());
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("graph is disconnected".into());
        }
        Ok(())
    }

    /// Door transitions `(parent room type, child room type)` recorded while
    /// growing the house.
    pub fn room_transitions(&self) -> Vec<(usize, usize)> {
        self.rooms
            .iter()
            .filter_map(|r| r.parent.map(|p| (self.rooms[p].room_type, r.room_type)))
            .collect()
    }
}

/// Heading (radians in `[0, 2π)`) from `from` to `to`.
pub fn heading(from: [f64; 2], to: [f64; 2]) -> f64 {
    let h = (to[1] - from[1]).atan2(to[0] - from[0]);
    if h < 0.0 {
        h + 2.0 * PI
    } else {
        h
    }
}

/// Sector index for a heading with `sectors` equal sectors, sector 0 centred
/// on heading 0.
pub fn sector_of(heading: f64, sectors: usize) -> usize {
    let width = 2.0 * PI / sectors as f64;
    let shifted = (heading + width / 2.0).rem_euclid(2.0 * PI);
    ((shifted / width).floor() as usize) % sectors
}

const GRID_STEPS: [(i32, i32); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

struct Builder<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
    cells: BTreeMap<(i32, i32), NodeId>,
    coords: Vec<(i32, i32)>,
    node_room: Vec<usize>,
    rooms: Vec<Room>,
    edges: Vec<(NodeId, NodeId)>,
    degree: Vec<usize>,
}

impl Builder<'_> {
    fn free_neighbors(&self, cell: (i32, i32)) -> Vec<(i32, i32)> {
        GRID_STEPS
            .iter()
            .map(|(dx, dy)| (cell.0 + dx, cell.1 + dy))
            .filter(|c| !self.cells.contains_key(c))
            .collect()
    }

    fn add_node(&mut self, cell: (i32, i32), room: usize) -> NodeId {
        let id = self.coords.len();
        self.cells.insert(cell, id);
        self.coords.push(cell);
        self.node_room.push(room);
        self.degree.push(0);
        self.rooms[room].nodes.push(id);
        id
    }

    fn connect(&mut self, a: NodeId, b: NodeId) {
        self.edges.push((a.min(b), a.max(b)));
        self.degree[a] += 1;
        self.degree[b] += 1;
    }

    fn can_connect(&self, a: NodeId) -> bool {
        self.degree[a] < self.cfg.max_degree
    }

    /// Grow room `room` from `seed_node` up to `size` cells.
    fn grow_room(&mut self, room: usize, size: usize, budget: usize) {
        let target = size.min(budget);
        while self.rooms[room].nodes.len() < target {
            let mut options: Vec<(NodeId, (i32, i32))> = Vec::new();
            for &n in &self.rooms[room].nodes {
                if !self.can_connect(n) {
                    continue;
                }
                for c in self.free_neighbors(self.coords[n]) {
                    options.push((n, c));
                }
            }
            let Some(&(from, cell)) = options.choose(&mut self.rng) else {
                break;
            };
            let id = self.add_node(cell, room);
            self.connect(from, id);
        }
        // close loops between grid-adjacent cells of the same room
        let nodes = self.rooms[room].nodes.clone();
        for &a in &nodes {
            for &(dx, dy) in &GRID_STEPS[..2] {
                let c = (self.coords[a].0 + dx, self.coords[a].1 + dy);
                let Some(&b) = self.cells.get(&c) else { continue };
                if self.node_room[b] != room {
                    continue;
                }
                let (lo, hi) = (a.min(b), a.max(b));
                if self.edges.contains(&(lo, hi)) {
                    continue;
                }
                if self.can_connect(a)
                    && self.can_connect(b)
                    && self.rng.gen_bool(self.cfg.loop_prob)
                {
                    self.connect(a, b);
                }
            }
        }
    }
}

/// Generate one house. Pure function of `(cfg, seed)`.
pub fn generate_house(cfg: &GenConfig, seed: u64, id: &str, split: Split) -> Result<HouseGraph> {
    cfg.validate()?;
    let protos = cfg.prototypes();
    let mut b = Builder {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(seed),
        cells: BTreeMap::new(),
        coords: Vec::new(),
        node_room: Vec::new(),
        rooms: Vec::new(),
        edges: Vec::new(),
        degree: Vec::new(),
    };
    let n_target = b.rng.gen_range(cfg.min_nodes..=cfg.max_nodes);
    let first_type = b.rng.gen_range(0..cfg.num_room_types);
    b.rooms.push(Room {
        room_type: first_type,
        parent: None,
        nodes: Vec::new(),
    });
    b.add_node((0, 0), 0);
    let size = b.rng.gen_range(cfg.min_room_size..=cfg.max_room_size);
    b.grow_room(0, size, n_target);

    let mut stalls = 0;
    while b.coords.len() < n_target {
        // candidate doors: (node, free cell) pairs on any room boundary
        let mut doors: Vec<(NodeId, (i32, i32))> = Vec::new();
        for n in 0..b.coords.len() {
            if b.can_connect(n) {
                for c in b.free_neighbors(b.coords[n]) {
                    doors.push((n, c));
                }
            }
        }
        let Some(&(from, cell)) = doors.choose(&mut b.rng) else {
            stalls += 1;
            if stalls > 3 {
                return Err(EnvError::Generation(format!(
                    "house {id}: no free door after {} nodes",
                    b.coords.len()
                )));
            }
            continue;
        };
        let parent = b.node_room[from];
        let parent_type = b.rooms[parent].room_type;
        let dist = WeightedIndex::new(&cfg.transitions.rows[parent_type])
            .map_err(|e| EnvError::Config(format!("transition row {parent_type}: {e}")))?;
        let child_type = dist.sample(&mut b.rng);
        let room = b.rooms.len();
        b.rooms.push(Room {
            room_type: child_type,
            parent: Some(parent),
            nodes: Vec::new(),
        });
        let first = b.add_node(cell, room);
        b.connect(from, first);
        let size = b.rng.gen_range(cfg.min_room_size..=cfg.max_room_size);
        let budget = n_target - b.coords.len() + 1;
        b.grow_room(room, size, budget);
    }

    let mut rng = b.rng;
    let positions: Vec<[f64; 2]> = b
        .coords
        .iter()
        .map(|&(x, y)| {
            let jx = if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..cfg.jitter) } else { 0.0 };
            let jy = if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..cfg.jitter) } else { 0.0 };
            [x as f64 * cfg.spacing + jx, y as f64 * cfg.spacing + jy]
        })
        .collect();
    let dist = |a: usize, c: usize| {
        ((positions[a][0] - positions[c][0]).powi(2) + (positions[a][1] - positions[c][1]).powi(2))
            .sqrt()
    };
    let mut edge_pairs = b.edges.clone();
    edge_pairs.sort_unstable();
    let edges: Vec<Edge> = edge_pairs
        .iter()
        .map(|&(a, c)| Edge {
            a,
            b: c,
            length: dist(a, c),
        })
        .collect();
    let mut adjacency = vec![Vec::new(); positions.len()];
    for &(a, c) in &edge_pairs {
        adjacency[a].push(c);
        adjacency[c].push(a);
    }

    let view_noise = Normal::new(0.0, cfg.view_noise)
        .map_err(|e| EnvError::Config(format!("view_noise: {e}")))?;
    let object_noise = Normal::new(0.0, cfg.object_noise)
        .map_err(|e| EnvError::Config(format!("object_noise: {e}")))?;
    let d = cfg.feature_dim;
    let mut nodes = Vec::with_capacity(positions.len());
    for (i, &pos) in positions.iter().enumerate() {
        let room_type = b.rooms[b.node_room[i]].room_type;
        // objects
        let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let typical = cfg.typical_objects(room_type);
        let mut objects: Vec<ObjectInstance> = Vec::new();
        for _ in 0..count {
            let mut placed = false;
            for _attempt in 0..8 {
                let class = if !typical.is_empty() && rng.gen_bool(cfg.typical_object_prob) {
                    *typical.choose(&mut rng).expect("non-empty")
                } else {
                    rng.gen_range(0..cfg.num_object_classes)
                };
                if objects.iter().any(|o| o.class == class) {
                    continue;
                }
                let feature = protos
                    .object(class)
                    .iter()
                    .map(|v| v + object_noise.sample(&mut rng))
                    .collect();
                let sector = rng.gen_range(0..cfg.sectors);
                objects.push(ObjectInstance {
                    class,
                    feature,
                    sector,
                });
                placed = true;
                break;
            }
            if !placed {
                break;
            }
        }
        // views
        let mut views = Vec::with_capacity(cfg.sectors);
        for s in 0..cfg.sectors {
            let own = protos.room(room_type);
            let foreign: Vec<usize> = adjacency[i]
                .iter()
                .filter(|&&n| sector_of(heading(pos, positions[n]), cfg.sectors) == s)
                .map(|&n| b.rooms[b.node_room[n]].room_type)
                .filter(|&t| t != room_type)
                .collect();
            let mut v: Vec<f64> = if foreign.is_empty() {
                own.to_vec()
            } else {
                let w = cfg.door_blend / foreign.len() as f64;
                let mut v: Vec<f64> = own.iter().map(|x| x * (1.0 - cfg.door_blend)).collect();
                for &t in &foreign {
                    for (a, x) in v.iter_mut().zip(protos.room(t)) {
                        *a += w * x;
                    }
                }
                v
            };
            for o in objects.iter().filter(|o| o.sector == s) {
                for (a, x) in v.iter_mut().zip(&o.feature) {
                    *a += x;
                }
            }
            for a in v.iter_mut() {
                *a += view_noise.sample(&mut rng);
            }
            debug_assert_eq!(v.len(), d);
            views.push(v);
        }
        nodes.push(NavNode {
            id: i,
            position: pos,
            room_type,
            room: b.node_room[i],
            views,
            objects,
        });
    }
    let house = HouseGraph::new(
        id.to_string(),
        split,
        cfg.transitions.id.clone(),
        nodes,
        edges,
        b.rooms,
    );
    house.validate(cfg.max_degree)?;
    Ok(house)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let cfg = GenConfig::default();
        let a = generate_house(&cfg, 11, "h", Split::Train).unwrap();
        let b = generate_house(&cfg, 11, "h", Split::Train).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_house(&cfg, 12, "h", Split::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_node_count() {
        let cfg = GenConfig {
            min_nodes: 12,
            max_nodes: 12,
            ..Default::default()
        };
        for seed in 0..20 {
            let h = generate_house(&cfg, seed, "h", Split::Train).unwrap();
            assert_eq!(h.len(), 12);
        }
    }

    #[test]
    fn invariants_hold_across_seeds() {
        let cfg = GenConfig::default();
        for seed in 0..50 {
            let h = generate_house(&cfg, seed, "h", Split::Train).unwrap();
            h.validate(cfg.max_degree).unwrap();
            assert!(h.len() >= cfg.min_nodes && h.len() <= cfg.max_nodes);
            for n in &h.nodes {
                assert_eq!(n.views.len(), cfg.sectors);
                assert!(n.views.iter().all(|v| v.len() == cfg.feature_dim));
            }
        }
    }

    #[test]
    fn bad_transition_matrix_is_config_error() {
        let mut cfg = GenConfig::default();
        cfg.transitions.rows[0][0] = 0.5;
        assert!(matches!(
            generate_house(&cfg, 0, "h", Split::Train),
            Err(EnvError::Config(_))
        ));
    }

    #[test]
    fn sector_geometry() {
        assert_eq!(sector_of(0.0, 4), 0);
        assert_eq!(sector_of(PI / 2.0, 4), 1);
        assert_eq!(sector_of(PI, 4), 2);
        assert_eq!(sector_of(3.0 * PI / 2.0, 4), 3);
        assert_eq!(sector_of(2.0 * PI - 0.1, 4), 0);
        assert_eq!(sector_of(PI / 4.0 - 1e-9, 4), 0);
        assert_eq!(sector_of(PI / 4.0 + 1e-9, 4), 1);
    }
}
