//! Episode execution: observe, update the map, decide, move.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, ImaginationSet};
use crate::env::{
    dijkstra_plan, house_distances, observe, shortest_distances, teacher_next_with, Episode,
    HouseGraph, NodeId,
};
use crate::eval::{PredictedObject, Trajectory};
use crate::tensor::{ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

use super::model::{encode_instruction, forward_step, fuse_local_visuals, init_params, AgentConfig, StepOutput};
use super::topo::{NodeStatus, TopoMap};

/// A configured model variant plus its room codebook.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub codebook: Option<Codebook>,
}

impl Agent {
    pub fn new(config: AgentConfig, codebook: Option<Codebook>) -> Result<Self> {
        config.validate()?;
        if config.use_layout && config.codebook != crate::codebook::CodebookKind::Classifier {
            let cb = codebook
                .as_ref()
                .ok_or_else(|| Error::Config("layout head needs a codebook".into()))?;
            if cb.rooms != config.num_rooms || cb.dim() != config.feature_dim {
                return Err(Error::Config(format!(
                    "codebook is {}×{}, model expects {} rooms of dim {}",
                    cb.rooms,
                    cb.dim(),
                    config.num_rooms,
                    config.feature_dim
                )));
            }
        }
        Ok(Self { config, codebook })
    }

    pub fn init_params(&self) -> Result<ParamSet> {
        init_params(&self.config)
    }
}

/// How actions are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Control {
    /// Highest-probability action.
    Greedy,
    /// Sample from the decision distribution.
    Sample,
    /// Always the supervision label.
    Teacher,
    /// Label with probability `beta`, otherwise sampled.
    Mixture { beta: f64 },
    /// Label with probability `beta`, otherwise greedy.
    MixtureGreedy { beta: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOptions {
    pub control: Control,
    /// Compute a supervision label at every step.
    pub labels: bool,
    /// Mask STOP while frontier nodes remain (forced stop still applies).
    pub suppress_stop: bool,
    /// Zero one map node's visual input at this step (1-based).
    pub mask_region_at: Option<usize>,
    pub seed: u64,
}

impl RolloutOptions {
    pub fn greedy() -> Self {
        Self {
            control: Control::Greedy,
            labels: false,
            suppress_stop: false,
            mask_region_at: None,
            seed: 0,
        }
    }
}

/// Per-step summary for offline analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub node: NodeId,
    pub map_size: usize,
    pub frontier: usize,
    /// `(node, predicted room type)` for every map node.
    pub layout: Vec<(NodeId, usize)>,
    /// `[min, mean, max]` of the per-node mixing weight.
    pub lambda: Option<[f64; 3]>,
    pub gate: f64,
    /// Target node, or `None` for STOP.
    pub action: Option<NodeId>,
}

pub struct StepRecord {
    pub step: usize,
    pub node: NodeId,
    /// Map node ids in row order (row `i + 1` of the node block).
    pub map_nodes: Vec<NodeId>,
    pub out: StepOutput,
    /// Row index of the supervision target (0 = STOP).
    pub label: Option<usize>,
    /// Row index of the executed action.
    pub action: usize,
    /// Map index (0-based) whose visual input was zeroed.
    pub masked_region: Option<usize>,
    pub at_goal: bool,
    pub trace: TraceStep,
}

pub struct Rollout {
    pub lang: Var,
    pub steps: Vec<StepRecord>,
    pub trajectory: Trajectory,
}

/// Supervision row at the current state: STOP at the goal; the shortest-path
/// next hop if it is a frontier node; else the frontier node minimising
/// known-graph distance from here plus true distance to the goal.
pub fn teacher_label(
    map: &TopoMap,
    house: &HouseGraph,
    goal: NodeId,
    dist_to_goal: &[f64],
) -> Result<usize> {
    let current = map.current().ok_or_else(|| Error::Invariant("label on empty map".into()))?;
    if current == goal {
        return Ok(0);
    }
    let next = teacher_next_with(house, current, goal, dist_to_goal)?;
    if map.node(next).is_some_and(|n| n.status == NodeStatus::Frontier) {
        return Ok(map.position_of(next).expect("on map") + 1);
    }
    let known = shortest_distances(&map.plan_graph(), current);
    let best = map
        .frontier()
        .filter_map(|f| known.get(&f.id).map(|d| (f.id, d + dist_to_goal[f.id])))
        .fold(None::<(NodeId, f64)>, |acc, (id, c)| match acc {
            Some((bid, bc)) if bc < c || (bc == c && bid < id) => acc,
            _ => Some((id, c)),
        });
    match best {
        Some((id, _)) => Ok(map.position_of(id).expect("on map") + 1),
        // nothing left to explore
        None => Ok(0),
    }
}

fn argmax_masked(values: &[f64], mask: &[bool]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && (best.0 == usize::MAX || v > best.1) {
            best = (i, v);
        }
    }
    best.0
}

fn sample_masked(values: &[f64], mask: &[bool], rng: &mut ChaCha8Rng) -> usize {
    let max = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            if u < x {
                return i;
            }
            u -= x;
        }
    }
    argmax_masked(values, mask)
}

/// Run one episode on `tape`. The instruction is encoded once; every step
/// rebuilds the node block from the current map.
pub fn rollout(
    tape: &mut Tape,
    params: &ParamSet,
    agent: &Agent,
    episode: &Episode,
    house: &HouseGraph,
    imagination: Option<&ImaginationSet>,
    opts: &RolloutOptions,
) -> Result<Rollout> {
    let cfg = &agent.config;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let lang = encode_instruction(tape, params, cfg, &episode.instruction)?;
    let imagination = match (cfg.use_dreamer, imagination) {
        (true, Some(im)) => Some(tape.constant(Tensor::from_rows(&im.vectors)?)),
        (true, None) => return Err(Error::Config(format!("episode {} has no imagination", episode.id))),
        _ => None,
    };
    let needs_labels = opts.labels
        || matches!(
            opts.control,
            Control::Teacher | Control::Mixture { .. } | Control::MixtureGreedy { .. }
        );
    let dist_to_goal = if needs_labels {
        house_distances(house, episode.goal)
    } else {
        Vec::new()
    };
    let mut map = TopoMap::new();
    let mut rep_vars: BTreeMap<NodeId, Var> = BTreeMap::new();
    let mut current = episode.start;
    let mut nodes = vec![current];
    let mut steps = Vec::new();
    let mut layout_history = Vec::new();
    let mut predicted = None;
    let mut stop_step = cfg.max_steps;
    for t in 1..=cfg.max_steps {
        let obs = observe(house, current)?;
        let object_feats: Vec<Vec<f64>> = obs.objects.iter().map(|o| o.feature.clone()).collect();
        let (views, objs) = fuse_local_visuals(tape, params, cfg, &obs.panorama, &object_feats)?;
        let all = match objs {
            Some(o) => tape.concat_rows(&[views, o])?,
            None => views,
        };
        let rep = tape.mean_rows(all);
        let rep_vals = tape.value(rep).data().to_vec();
        let nb_pos: Vec<[f64; 2]> = obs.neighbors.iter().map(|n| house.nodes[n.node].position).collect();
        if map.update(&obs, t, &rep_vals, house.nodes[current].position, &nb_pos)? {
            rep_vars.insert(current, rep);
        }
        let label = if needs_labels {
            Some(teacher_label(&map, house, episode.goal, &dist_to_goal)?)
        } else {
            None
        };
        let masked_region = if opts.mask_region_at == Some(t) {
            let candidates: Vec<usize> = (0..map.len()).filter(|&i| label != Some(i + 1)).collect();
            if candidates.is_empty() {
                None
            } else {
                Some(candidates[rng.gen_range(0..candidates.len())])
            }
        } else {
            None
        };
        let mut rows = Vec::with_capacity(map.len());
        for (i, n) in map.nodes().iter().enumerate() {
            let v = if masked_region == Some(i) {
                tape.constant(Tensor::zeros(&[1, n.rep.len()]))
            } else if let Some(&v) = rep_vars.get(&n.id) {
                v
            } else {
                tape.constant(Tensor::new(vec![1, n.rep.len()], n.rep.clone())?)
            };
            rows.push(v);
        }
        let visual = tape.concat_rows(&rows)?;
        let out = forward_step(
            tape,
            params,
            cfg,
            agent.codebook.as_ref(),
            lang,
            imagination,
            &map,
            visual,
            objs,
        )?;
        let map_nodes: Vec<NodeId> = map.nodes().iter().map(|n| n.id).collect();
        let layout: Vec<(NodeId, usize)> = match out.layout {
            Some(l) => {
                let t = tape.value(l);
                let k = t.dims2().1;
                map_nodes
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| (id, argmax_masked(t.row(i), &vec![true; k])))
                    .collect()
            }
            None => Vec::new(),
        };
        let logits = tape.value(out.logits).data().to_vec();
        let mut allowed = out.mask.clone();
        let has_frontier = allowed.iter().skip(1).any(|&a| a);
        if opts.suppress_stop && has_frontier && t < cfg.max_steps {
            allowed[0] = false;
        }
        let action = if t == cfg.max_steps || !has_frontier {
            0
        } else {
            match opts.control {
                Control::Greedy => argmax_masked(&logits, &allowed),
                Control::Sample => sample_masked(&logits, &allowed, &mut rng),
                Control::Teacher => label.expect("labels computed"),
                Control::Mixture { beta } => {
                    if rng.gen_bool(beta.clamp(0.0, 1.0)) {
                        label.expect("labels computed")
                    } else {
                        sample_masked(&logits, &allowed, &mut rng)
                    }
                }
                Control::MixtureGreedy { beta } => {
                    if rng.gen_bool(beta.clamp(0.0, 1.0)) {
                        label.expect("labels computed")
                    } else {
                        argmax_masked(&logits, &allowed)
                    }
                }
            }
        };
        let lambda = out.lambda.map(|l| {
            let d = tape.value(l).data();
            let min = d.iter().copied().fold(f64::INFINITY, f64::min);
            let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            [min, d.iter().sum::<f64>() / d.len() as f64, max]
        });
        let target = (action > 0).then(|| map_nodes[action - 1]);
        let trace = TraceStep {
            step: t,
            node: current,
            map_size: map.len(),
            frontier: map.frontier().count(),
            layout: layout.clone(),
            lambda,
            gate: tape.value(out.gate).data()[0],
            action: target,
        };
        layout_history.push(layout);
        let object_scores = out.objects.map(|o| tape.value(o).data().to_vec());
        steps.push(StepRecord {
            step: t,
            node: current,
            map_nodes,
            out,
            label,
            action,
            masked_region,
            at_goal: current == episode.goal,
            trace,
        });
        match target {
            None => {
                if let Some(scores) = object_scores {
                    let k = argmax_masked(&scores, &vec![true; scores.len()]);
                    predicted = Some(PredictedObject {
                        class: obs.objects[k].class,
                        node: current,
                    });
                }
                stop_step = t;
                break;
            }
            Some(target) => {
                let plan = dijkstra_plan(&map.plan_graph(), current, target)?;
                let path = plan.path().ok_or_else(|| {
                    Error::Invariant(format!("frontier node {target} unreachable in the known graph"))
                })?;
                nodes.extend_from_slice(&path[1..]);
                current = target;
            }
        }
    }
    Ok(Rollout {
        lang,
        steps,
        trajectory: Trajectory {
            episode_id: episode.id.clone(),
            nodes,
            predicted_object: predicted,
            layout: layout_history,
            stop_step,
        },
    })
}
