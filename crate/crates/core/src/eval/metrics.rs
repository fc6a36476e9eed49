use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Episode, HouseGraph, NodeId};
use crate::{Error, Result};

/// Euclidean radius (meters) within which a stop counts as success.
pub const SUCCESS_RADIUS: f64 = 3.0;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedObject {
    pub class: usize,
    pub node: NodeId,
}

/// An executed episode. `nodes` lists every node passed, one edge apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: String,
    pub nodes: Vec<NodeId>,
    pub predicted_object: Option<PredictedObject>,
    /// Per decision step, `(node, predicted room type)` for the map nodes.
    pub layout: Vec<Vec<(NodeId, usize)>>,
    pub stop_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub tl: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
}

impl EpisodeMetrics {
    /// `SPL ≤ SR`, `RGSPL ≤ RGS ≤ SR ≤ OSR`.
    pub fn identities_hold(&self) -> bool {
        self.spl <= self.sr && self.rgspl <= self.rgs && self.rgs <= self.sr && self.sr <= self.osr
    }
}

pub fn score_episode(
    traj: &Trajectory,
    episode: &Episode,
    house: &HouseGraph,
    radius: f64,
) -> Result<EpisodeMetrics> {
    if traj.episode_id != episode.id || episode.house_id != house.id {
        return Err(Error::Invariant(format!(
            "trajectory {} does not belong to episode {} in house {}",
            traj.episode_id, episode.id, house.id
        )));
    }
    if traj.nodes.first() != Some(&episode.start) {
        return Err(Error::Invariant(format!("trajectory {} does not start at the start node", traj.episode_id)));
    }
    let mut tl = 0.0;
    for w in traj.nodes.windows(2) {
        tl += house.edge_length(w[0], w[1]).ok_or_else(|| {
            Error::Invariant(format!("trajectory {} jumps {} -> {}", traj.episode_id, w[0], w[1]))
        })?;
    }
    let within = |n: NodeId| house.distance(n, episode.goal) < radius;
    let stop = *traj.nodes.last().expect("non-empty");
    let sr = if within(stop) { 1.0 } else { 0.0 };
    let osr = if traj.nodes.iter().any(|&n| within(n)) { 1.0 } else { 0.0 };
    let gold = episode.gold_length;
    let weight = if gold > 0.0 { gold / tl.max(gold) } else { 1.0 };
    let target = PredictedObject {
        class: house.nodes[episode.goal].objects[episode.target_object].class,
        node: episode.goal,
    };
    let rgs = if sr == 1.0 && traj.predicted_object == Some(target) { 1.0 } else { 0.0 };
    Ok(EpisodeMetrics {
        episode_id: traj.episode_id.clone(),
        tl,
        sr,
        osr,
        spl: sr * weight,
        rgs,
        rgspl: rgs * weight,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub tl: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
}

impl MetricSet {
    fn from_rows(rows: &[&EpisodeMetrics]) -> Self {
        let n = rows.len() as f64;
        let mut m = Self::default();
        for r in rows {
            m.tl += r.tl / n;
            m.sr += r.sr / n;
            m.osr += r.osr / n;
            m.spl += r.spl / n;
            m.rgs += r.rgs / n;
            m.rgspl += r.rgspl / n;
        }
        m
    }

    fn values(&self) -> [f64; 6] {
        [self.tl, self.sr, self.osr, self.spl, self.rgs, self.rgspl]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            tl: v[0],
            sr: v[1],
            osr: v[2],
            spl: v[3],
            rgs: v[4],
            rgspl: v[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean: MetricSet,
    /// 95% percentile-bootstrap interval.
    pub lower: MetricSet,
    pub upper: MetricSet,
}

/// Split means with seeded bootstrap confidence intervals.
pub fn aggregate(rows: &[EpisodeMetrics], seed: u64) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Invariant("aggregate of zero episodes".into()));
    }
    let all: Vec<&EpisodeMetrics> = rows.iter().collect();
    let mean = MetricSet::from_rows(&all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<[f64; 6]> = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut pick = Vec::with_capacity(rows.len());
    for _ in 0..BOOTSTRAP_RESAMPLES {
        pick.clear();
        for _ in 0..rows.len() {
            pick.push(&rows[rng.gen_range(0..rows.len())]);
        }
        samples.push(MetricSet::from_rows(&pick).values());
    }
    let mut lo = [0.0; 6];
    let mut hi = [0.0; 6];
    for k in 0..6 {
        let mut col: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        col.sort_by(f64::total_cmp);
        let at = |p: f64| col[((p * (col.len() - 1) as f64).round() as usize).min(col.len() - 1)];
        lo[k] = at(0.025);
        hi[k] = at(0.975);
    }
    Ok(Summary {
        episodes: rows.len(),
        mean,
        lower: MetricSet::from_values(lo),
        upper: MetricSet::from_values(hi),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracy {
    /// 1-based decision step.
    pub step: usize,
    pub accuracy: f64,
    /// Trajectories still running at this step.
    pub trajectories: usize,
}

/// Mean over trajectories alive at step `t` of the fraction of map nodes
/// whose predicted room type is correct.
pub fn room_accuracy_by_step(runs: &[(&Trajectory, &HouseGraph)]) -> Vec<StepAccuracy> {
    let horizon = runs.iter().map(|(t, _)| t.layout.len()).max().unwrap_or(0);
    (0..horizon)
        .filter_map(|s| {
            let fracs: Vec<f64> = runs
                .iter()
                .filter_map(|(t, h)| t.layout.get(s).filter(|l| !l.is_empty()).map(|l| (l, h)))
                .map(|(l, h)| {
                    let hits = l.iter().filter(|&&(n, k)| h.nodes[n].room_type == k).count();
                    hits as f64 / l.len() as f64
                })
                .collect();
            (!fracs.is_empty()).then(|| StepAccuracy {
                step: s + 1,
                accuracy: fracs.iter().sum::<f64>() / fracs.len() as f64,
                trajectories: fracs.len(),
            })
        })
        .collect()
}

/// Uniform random neighbour moves for `k ~ U[4, 7]` steps, then a uniform
/// object pick at the final node.
pub fn random_walk(episode: &Episode, house: &HouseGraph, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = rng.gen_range(4..=7);
    let mut nodes = vec![episode.start];
    let mut cur = episode.start;
    for _ in 0..steps {
        let nbs = house.neighbors(cur);
        cur = nbs[rng.gen_range(0..nbs.len())].0;
        nodes.push(cur);
    }
    let objs = &house.nodes[cur].objects;
    let predicted_object = (!objs.is_empty()).then(|| PredictedObject {
        class: objs[rng.gen_range(0..objs.len())].class,
        node: cur,
    });
    Trajectory {
        episode_id: episode.id.clone(),
        nodes,
        predicted_object,
        layout: Vec::new(),
        stop_step: steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_house, sample_episode, EpisodeConfig, GenConfig, Split, Vocab};

    fn setup() -> (HouseGraph, Episode) {
        let house = generate_house(&GenConfig::default(), 2, "h", Split::ValUnseen).unwrap();
        let ep = sample_episode(&house, &EpisodeConfig::default(), &Vocab::new(8, 16), 3, "e", Split::ValUnseen)
            .unwrap();
        (house, ep)
    }

    fn gold(ep: &Episode, house: &HouseGraph) -> Trajectory {
        Trajectory {
            episode_id: ep.id.clone(),
            nodes: ep.gold_path.clone(),
            predicted_object: Some(PredictedObject {
                class: house.nodes[ep.goal].objects[ep.target_object].class,
                node: ep.goal,
            }),
            layout: vec![],
            stop_step: ep.gold_path.len(),
        }
    }

    #[test]
    fn perfect_episode_scores_one() {
        let (house, ep) = setup();
        let m = score_episode(&gold(&ep, &house), &ep, &house, SUCCESS_RADIUS).unwrap();
        assert_eq!((m.sr, m.osr, m.rgs, m.spl, m.rgspl), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!((m.tl - ep.gold_length).abs() < 1e-12);
    }

    #[test]
    fn double_length_halves_spl() {
        let (house, ep) = setup();
        let mut t = gold(&ep, &house);
        // walk the gold path forward, back, and forward again: 3x length
        let back: Vec<usize> = ep.gold_path.iter().rev().skip(1).copied().collect();
        t.nodes.extend(back);
        t.nodes.extend(ep.gold_path.iter().skip(1));
        let m = score_episode(&t, &ep, &house, SUCCESS_RADIUS).unwrap();
        assert!((m.spl - 1.0 / 3.0).abs() < 1e-12);
        // a detour of exactly one extra gold length
        let ep2 = Episode {
            gold_length: m.tl / 2.0,
            ..ep.clone()
        };
        let m2 = score_episode(&t, &ep2, &house, SUCCESS_RADIUS).unwrap();
        assert!((m2.spl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn near_miss_within_radius_succeeds() {
        let (house, ep) = setup();
        let m = score_episode(&gold(&ep, &house), &ep, &house, 1e-9).unwrap();
        assert_eq!(m.sr, 1.0);
        let mut t = gold(&ep, &house);
        t.nodes.pop();
        let prev = *t.nodes.last().unwrap();
        let d = house.distance(prev, ep.goal);
        let m = score_episode(&t, &ep, &house, d + 1e-9).unwrap();
        assert_eq!(m.sr, 1.0);
        let m = score_episode(&t, &ep, &house, d).unwrap();
        assert_eq!(m.sr, 0.0);
    }

    #[test]
    fn jump_is_rejected() {
        let (house, ep) = setup();
        let t = Trajectory {
            episode_id: ep.id.clone(),
            nodes: vec![ep.start, ep.goal],
            predicted_object: None,
            layout: vec![],
            stop_step: 1,
        };
        assert!(score_episode(&t, &ep, &house, SUCCESS_RADIUS).is_err());
    }

    #[test]
    fn single_row_aggregate_is_the_row() {
        let row = EpisodeMetrics {
            episode_id: "a".into(),
            tl: 4.0,
            sr: 1.0,
            osr: 1.0,
            spl: 0.5,
            rgs: 0.0,
            rgspl: 0.0,
        };
        let s = aggregate(&[row.clone()], 0).unwrap();
        assert_eq!(s.mean.spl, 0.5);
        assert_eq!((s.lower.sr, s.upper.sr), (1.0, 1.0));
        assert_eq!(aggregate(&[row.clone(), row], 3).unwrap(), aggregate(&[s_row(), s_row()], 3).unwrap());
    }

    fn s_row() -> EpisodeMetrics {
        EpisodeMetrics {
            episode_id: "a".into(),
            tl: 4.0,
            sr: 1.0,
            osr: 1.0,
            spl: 0.5,
            rgs: 0.0,
            rgspl: 0.0,
        }
    }

    #[test]
    fn oracle_layout_is_flat_at_one() {
        let (house, ep) = setup();
        let mut t = gold(&ep, &house);
        t.layout = (0..5)
            .map(|s| (0..=s).map(|n| (n, house.nodes[n].room_type)).collect())
            .collect();
        let curve = room_accuracy_by_step(&[(&t, &house)]);
        assert_eq!(curve.len(), 5);
        assert!(curve.iter().all(|c| c.accuracy == 1.0));
    }

    #[test]
    fn random_walk_is_a_valid_trajectory() {
        let (house, ep) = setup();
        for s in 0..20 {
            let t = random_walk(&ep, &house, s);
            assert!(score_episode(&t, &ep, &house, SUCCESS_RADIUS).unwrap().identities_hold());
        }
    }
}
