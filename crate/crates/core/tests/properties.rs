//! Property tests for the invariants each layer promises.

use lad::agent::{layout_predict, rollout, Agent, AgentConfig, Control, RolloutOptions};
use lad::codebook::{build_room_codebook, room_samples, CodebookConfig, CodebookKind};
use lad::env::{
    dijkstra_plan, generate_dataset, generate_house, house_distances, sample_episode, teacher_next, DataConfig,
    Dataset, Edge, EpisodeConfig, GenConfig, HouseGraph, NavNode, PlanGraph, Room, Split, Vocab, ROOM_NAMES,
};
use lad::eval::{score_episode, PredictedObject, Trajectory, SUCCESS_RADIUS};
use lad::tensor::{AdamW, AdamWConfig, ParamSet, Tape, Tensor};
use lad::train::{all_imaginations, codebook_for};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>)> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-30.0..30.0f64, r * c),
            prop::collection::vec(any::<bool>(), r * c),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution_over_its_support((r, c, data, mut mask) in rows(5, 9)) {
        for i in 0..r {
            mask[i * c] = true;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![r, c], data.clone()).unwrap());
        let p = tape.softmax(x, Some(&mask)).unwrap();
        let again = tape.softmax(x, Some(&mask)).unwrap();
        prop_assert_eq!(tape.value(p).data(), tape.value(again).data());
        for i in 0..r {
            let row = tape.value(p).row(i);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for j in 0..c {
                prop_assert!(mask[i * c + j] || row[j] == 0.0);
                prop_assert!(row[j] >= 0.0);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_the_identity(values in prop::collection::vec(-5.0..5.0f64, 1..20), decay in 0.0..0.5f64) {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![values.len()], values.clone()).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, weight_decay: decay, ..AdamWConfig::default() });
        for _ in 0..3 {
            opt.step(&mut params, &grads).unwrap();
        }
        prop_assert_eq!(params.get("w").unwrap().data(), &values[..]);
    }
}

fn gen() -> GenConfig {
    GenConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generation_is_pure_and_valid(seed in any::<u64>()) {
        let a = generate_house(&gen(), seed, "h", Split::Train).unwrap();
        let b = generate_house(&gen(), seed, "h", Split::Train).unwrap();
        prop_assert_eq!(&a, &b);
        a.validate(gen().max_degree).unwrap();
    }

    #[test]
    fn planner_never_loses_to_a_random_walk(seed in any::<u64>(), walk_len in 1usize..30) {
        let house = generate_house(&gen(), seed, "h", Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let start = rng.gen_range(0..house.len());
        let (mut at, mut walked) = (start, 0.0);
        for _ in 0..walk_len {
            let nbs = house.neighbors(at);
            let (next, len) = nbs[rng.gen_range(0..nbs.len())];
            walked += len;
            at = next;
        }
        let plan = dijkstra_plan(&PlanGraph::from_house(&house), start, at).unwrap();
        prop_assert!(plan.length().unwrap() <= walked + 1e-12);
    }

    #[test]
    fn teacher_steps_strictly_approach_the_goal(seed in any::<u64>()) {
        let house = generate_house(&gen(), seed, "h", Split::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let (c, g) = (rng.gen_range(0..house.len()), rng.gen_range(0..house.len()));
        prop_assume!(c != g);
        let dist = house_distances(&house, g);
        let next = teacher_next(&house, c, g).unwrap();
        prop_assert!(dist[next] < dist[c]);
        let edge = house.edge_length(c, next).unwrap();
        prop_assert!((edge + dist[next] - dist[c]).abs() <= 1e-9);
    }

    #[test]
    fn gold_length_is_the_planner_length(seed in any::<u64>()) {
        let house = generate_house(&gen(), seed, "h", Split::Train).unwrap();
        let vocab = Vocab::new(gen().num_room_types, gen().num_object_classes);
        let Ok(ep) = sample_episode(&house, &EpisodeConfig::default(), &vocab, seed, "e", Split::Train) else {
            return Ok(());
        };
        let plan = dijkstra_plan(&PlanGraph::from_house(&house), ep.start, ep.goal).unwrap();
        prop_assert_eq!(plan.length(), Some(ep.gold_length));
        prop_assert_eq!(plan.path().unwrap(), &ep.gold_path[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn codebook_build_is_deterministic(seed in any::<u64>()) {
        let g = gen();
        let typical: Vec<Vec<usize>> = (0..g.num_room_types).map(|r| g.typical_objects(r)).collect();
        let cfg = CodebookConfig { seed, samples: 30, ..CodebookConfig::default() };
        let labels = &ROOM_NAMES[..g.num_room_types];
        let a = build_room_codebook(&g.prototypes(), &typical, labels, &cfg).unwrap();
        let b = build_room_codebook(&g.prototypes(), &typical, labels, &cfg).unwrap();
        prop_assert_eq!(a.entries.data(), b.entries.data());
    }

    /// Noise-free room samples are always recognised while the codebook's
    /// own sample noise stays at or below 0.5.
    #[test]
    fn clean_rooms_are_classified_exactly(seed in any::<u64>(), sigma in 0.0..=0.5f64) {
        let g = gen();
        let protos = g.prototypes();
        let typical: Vec<Vec<usize>> = (0..g.num_room_types).map(|r| g.typical_objects(r)).collect();
        let cfg = CodebookConfig { seed, sigma, samples: 40, ..CodebookConfig::default() };
        let cb = build_room_codebook(&protos, &typical, &ROOM_NAMES[..g.num_room_types], &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, t) in typical.iter().enumerate() {
            for v in room_samples(&protos, k, t, 10, 0.0, &mut rng).unwrap() {
                prop_assert_eq!(cb.nearest_room(&v), k);
            }
        }
    }
}

struct Fixture {
    data: Dataset,
    agent: Agent,
    params: ParamSet,
    imaginations: std::collections::BTreeMap<String, lad::codebook::ImaginationSet>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = DataConfig {
            train_houses: 3,
            val_unseen_houses: 3,
            train_episodes_per_house: 2,
            val_unseen_episodes_per_house: 3,
            ..DataConfig::default()
        };
        let data = generate_dataset(&cfg, 9).unwrap();
        let agent = Agent::new(
            AgentConfig::default(),
            codebook_for(&data, CodebookKind::Visual, &Default::default()).unwrap(),
        )
        .unwrap();
        let mut params = agent.init_params().unwrap();
        // Untrained heads are nearly uniform; spread them so sampling visits
        // varied states.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (name, t) in params.iter_mut() {
            if name.starts_with("head.") && name.ends_with(".w") {
                *t = Tensor::normal(t.shape(), 0.5, &mut rng);
            }
        }
        let imaginations = all_imaginations(&data, 0.2, 0).unwrap();
        Fixture { data, agent, params, imaginations }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn policy_outputs_are_distributions_with_the_masking_contract(ep_index in 0usize..9, seed in any::<u64>()) {
        let f = fixture();
        let ep = &f.data.episodes(Split::ValUnseen)[ep_index];
        let house = f.data.house(&ep.house_id).unwrap();
        let opts = RolloutOptions { control: Control::Sample, seed, ..RolloutOptions::greedy() };
        let mut tape = Tape::new();
        let run = rollout(&mut tape, &f.params, &f.agent, ep, house, f.imaginations.get(&ep.id), &opts).unwrap();
        let mut visited = vec![ep.start];
        for s in &run.steps {
            prop_assert!(!s.out.frontier_mask[0], "STOP outside the dreamer support");
            for (i, n) in s.map_nodes.iter().enumerate() {
                if visited.contains(n) {
                    prop_assert!(!s.out.mask[i + 1], "visited node {} offered as a target", n);
                }
            }
            for (logits, mask) in [(Some(s.out.logits), &s.out.mask), (s.out.dream_logits, &s.out.frontier_mask)] {
                let Some(logits) = logits else { continue };
                if !mask.contains(&true) {
                    continue;
                }
                let p = tape.softmax(logits, Some(mask)).unwrap();
                let sum: f64 = tape.value(p).data().iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
            }
            if let Some(l) = s.out.lambda {
                prop_assert!(tape.value(l).data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            if let Some(a) = s.trace.action {
                visited.push(a);
            }
        }
    }

    #[test]
    fn layout_argmax_ignores_positive_rescaling(seed in any::<u64>(), scale in 0.05..20.0f64) {
        let f = fixture();
        let cb = f.agent.codebook.as_ref().unwrap();
        let x = Tensor::normal(&[5, f.agent.config.hidden], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let scaled = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * scale).collect()).unwrap();
        let argmax = |t: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let s = layout_predict(&mut tape, &f.params, CodebookKind::Visual, v, Some(cb)).unwrap();
            let out = tape.value(s);
            (0..out.dims2().0)
                .map(|r| out.row(r).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0)
                .collect::<Vec<_>>()
        };
        prop_assert_eq!(argmax(x), argmax(scaled));
    }
}

/// The same house with node ids permuted by `perm` (old id -> new id).
fn relabel(house: &HouseGraph, perm: &[usize]) -> HouseGraph {
    let mut nodes: Vec<NavNode> = house.nodes.clone();
    for n in &house.nodes {
        nodes[perm[n.id]] = NavNode { id: perm[n.id], ..n.clone() };
    }
    let edges = house
        .edges
        .iter()
        .map(|e| Edge { a: perm[e.a], b: perm[e.b], length: e.length })
        .collect();
    let rooms = house
        .rooms
        .iter()
        .map(|r| Room { nodes: r.nodes.iter().map(|&n| perm[n]).collect(), ..r.clone() })
        .collect();
    HouseGraph::new(house.id.clone(), house.split, house.transition_id.clone(), nodes, edges, rooms)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_hold_their_identities_and_ignore_node_labels(seed in any::<u64>(), steps in 0usize..10, pick in 0u8..3) {
        let house = generate_house(&gen(), seed, "h", Split::ValUnseen).unwrap();
        let vocab = Vocab::new(gen().num_room_types, gen().num_object_classes);
        let Ok(ep) = sample_episode(&house, &EpisodeConfig::default(), &vocab, seed, "e", Split::ValUnseen) else {
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = if pick == 0 { ep.gold_path.clone() } else { vec![ep.start] };
        for _ in 0..steps {
            let nbs = house.neighbors(*nodes.last().unwrap());
            nodes.push(nbs[rng.gen_range(0..nbs.len())].0);
        }
        let end = *nodes.last().unwrap();
        let predicted_object = match pick {
            0 => Some(PredictedObject { class: house.nodes[ep.goal].objects[ep.target_object].class, node: ep.goal }),
            1 => house.nodes[end].objects.first().map(|o| PredictedObject { class: o.class, node: end }),
            _ => None,
        };
        let traj = Trajectory { episode_id: ep.id.clone(), stop_step: nodes.len(), nodes, predicted_object, layout: Vec::new() };
        let m = score_episode(&traj, &ep, &house, SUCCESS_RADIUS).unwrap();
        prop_assert!(m.spl <= m.sr && m.rgspl <= m.rgs && m.rgs <= m.sr && m.sr <= m.osr);

        let mut perm: Vec<usize> = (0..house.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let h2 = relabel(&house, &perm);
        let ep2 = lad::env::Episode {
            start: perm[ep.start],
            goal: perm[ep.goal],
            gold_path: ep.gold_path.iter().map(|&n| perm[n]).collect(),
            ..ep.clone()
        };
        let t2 = Trajectory {
            nodes: traj.nodes.iter().map(|&n| perm[n]).collect(),
            predicted_object: traj.predicted_object.map(|p| PredictedObject { node: perm[p.node], ..p }),
            ..traj.clone()
        };
        prop_assert_eq!(score_episode(&t2, &ep2, &h2, SUCCESS_RADIUS).unwrap(), m);
    }
}
