use serde::{Deserialize, Serialize};

use super::house::{heading, sector_of, HouseGraph, NodeId, ObjectInstance};
use super::Result;

/// A navigable neighbour as seen from the current node: only the single
/// view facing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborView {
    pub node: NodeId,
    pub view: Vec<f64>,
    pub distance: f64,
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub node: NodeId,
    pub panorama: Vec<Vec<f64>>,
    pub objects: Vec<ObjectInstance>,
    pub neighbors: Vec<NeighborView>,
}

pub fn observe(house: &HouseGraph, node: NodeId) -> Result<Observation> {
    let here = house.node(node)?;
    let sectors = here.views.len();
    let neighbors = house
        .neighbors(node)
        .iter()
        .map(|&(n, length)| {
            let h = heading(here.position, house.nodes[n].position);
            NeighborView {
                node: n,
                view: here.views[sector_of(h, sectors)].clone(),
                distance: length,
                heading: h,
            }
        })
        .collect();
    Ok(Observation {
        node,
        panorama: here.views.clone(),
        objects: here.objects.clone(),
        neighbors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::house::{Edge, NavNode, Room, Split};
    use crate::env::EnvError;

    fn node(id: usize, x: f64, y: f64) -> NavNode {
        NavNode {
            id,
            position: [x, y],
            room_type: 0,
            room: 0,
            views: (0..4).map(|s| vec![id as f64, s as f64]).collect(),
            objects: vec![],
        }
    }

    fn tiny_house() -> HouseGraph {
        // 0 at origin, 1 due east, 2 due north of 1
        let nodes = vec![node(0, 0.0, 0.0), node(1, 3.0, 0.0), node(2, 3.0, 2.5)];
        let edges = vec![
            Edge { a: 0, b: 1, length: 3.0 },
            Edge { a: 1, b: 2, length: 2.5 },
        ];
        let rooms = vec![Room { room_type: 0, parent: None, nodes: vec![0, 1, 2] }];
        HouseGraph::new("t".into(), Split::Train, "x".into(), nodes, edges, rooms)
    }

    #[test]
    fn degree_one_node_has_one_neighbor() {
        let obs = observe(&tiny_house(), 0).unwrap();
        assert_eq!(obs.neighbors.len(), 1);
    }

    #[test]
    fn east_neighbor_sees_sector_zero() {
        let house = tiny_house();
        let obs = observe(&house, 0).unwrap();
        assert_eq!(obs.neighbors[0].view, house.nodes[0].views[0]);
        assert_eq!(obs.neighbors[0].distance, 3.0);
        let obs = observe(&house, 1).unwrap();
        let north = obs.neighbors.iter().find(|n| n.node == 2).unwrap();
        assert_eq!(north.view, house.nodes[1].views[1]);
        let west = obs.neighbors.iter().find(|n| n.node == 0).unwrap();
        assert_eq!(west.view, house.nodes[1].views[2]);
    }

    #[test]
    fn unknown_node_errors() {
        assert!(matches!(observe(&tiny_house(), 9), Err(EnvError::UnknownNode(9))));
    }
}
