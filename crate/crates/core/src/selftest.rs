//! Built-in verification behind `lad selftest`: finite-difference gradient
//! checks of every tape op, the model blocks and one whole training
//! episode, plus brute-force oracles for the planner, the metrics and
//! k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    dreamer, embed_nodes, encode_instruction, fuse_local_visuals, gasa, ground_objects, hop_buckets,
    Agent, AgentConfig, Control, TopoMap,
};
use crate::codebook::{
    build_room_codebook, imagine_episode, kmeans, sq_dist, CodebookConfig, CodebookKind, ImaginationSet,
};
use crate::env::{
    dijkstra_plan, generate_house, observe, sample_episode, Episode, EpisodeConfig, GenConfig,
    HouseGraph, PlanGraph, Split, Vocab, ROOM_NAMES,
};
use crate::eval::{score_episode, EpisodeMetrics, PredictedObject, Trajectory, SUCCESS_RADIUS};
use crate::tensor::nn::{self, Init};
use crate::tensor::{grad_check, ParamSet, Tape, Tensor, TensorError, Var};
use crate::train::{episode_loss, Terms};
use crate::{Error, Result};

/// Worst relative error allowed for a single op or block.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Worst relative error allowed for a whole training episode.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured ≤ tolerance`.
    pub fn at_most(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::normal(shape, 1.0, &mut rng(seed))
}

/// `Σ w ⊙ x` against fixed random weights, so every output entry carries a
/// distinct upstream gradient.
fn probe(tape: &mut Tape, x: Var, seed: u64) -> std::result::Result<Var, TensorError> {
    let w = tape.constant(random(tape.value(x).shape(), seed));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

type OpFn = fn(&mut Tape, &ParamSet) -> std::result::Result<Var, TensorError>;

fn op_cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, OpFn)> {
    fn p(t: &mut Tape, ps: &ParamSet, n: &str) -> std::result::Result<Var, TensorError> {
        t.param(ps, n)
    }
    vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 2])], |t, ps| {
            let (a, b) = (p(t, ps, "a")?, p(t, ps, "b")?);
            let y = t.matmul(a, b)?;
            probe(t, y, 1)
        }),
        ("matmul_nt", vec![("a", vec![3, 4]), ("b", vec![5, 4])], |t, ps| {
            let (a, b) = (p(t, ps, "a")?, p(t, ps, "b")?);
            let y = t.matmul_nt(a, b)?;
            probe(t, y, 2)
        }),
        ("add_sub_mul", vec![("a", vec![2, 3]), ("b", vec![2, 3])], |t, ps| {
            let (a, b) = (p(t, ps, "a")?, p(t, ps, "b")?);
            let s = t.add(a, b)?;
            let d = t.sub(s, b)?;
            let m = t.mul(d, b)?;
            probe(t, m, 3)
        }),
        ("add_row_mul_col_mul_scalar", vec![("a", vec![3, 4]), ("r", vec![1, 4]), ("c", vec![3, 1]), ("s", vec![1])], |t, ps| {
            let (a, r, c, s) = (p(t, ps, "a")?, p(t, ps, "r")?, p(t, ps, "c")?, p(t, ps, "s")?);
            let y = t.add_row(a, r)?;
            let y = t.mul_col(y, c)?;
            let y = t.mul_scalar(y, s)?;
            probe(t, y, 4)
        }),
        ("affine_gelu_sigmoid", vec![("a", vec![2, 5])], |t, ps| {
            let a = p(t, ps, "a")?;
            let y = t.affine(a, 1.5, -0.2);
            let g = t.gelu(y);
            let s = t.sigmoid(g);
            probe(t, s, 5)
        }),
        ("masked_softmax", vec![("a", vec![2, 4])], |t, ps| {
            let a = p(t, ps, "a")?;
            let y = t.softmax(a, Some(&[true, false, true, true, true, true, false, true]))?;
            probe(t, y, 6)
        }),
        ("masked_cross_entropy", vec![("a", vec![3, 4])], |t, ps| {
            let a = p(t, ps, "a")?;
            let mask = [true, true, false, true, false, true, true, true, true, true, true, false];
            t.cross_entropy(a, &[3, 1, 0], Some(&mask))
        }),
        ("layer_norm", vec![("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])], |t, ps| {
            let (x, g, b) = (p(t, ps, "x")?, p(t, ps, "g")?, p(t, ps, "b")?);
            let y = t.layer_norm(x, g, b)?;
            probe(t, y, 7)
        }),
        ("concat_slice_gather_scatter", vec![("a", vec![2, 3]), ("b", vec![2, 2]), ("c", vec![1, 5])], |t, ps| {
            let (a, b, c) = (p(t, ps, "a")?, p(t, ps, "b")?, p(t, ps, "c")?);
            let ab = t.concat_cols(&[a, b])?;
            let abc = t.concat_rows(&[ab, c])?;
            let s = t.slice_cols(abc, 1, 4)?;
            let g = t.gather_rows(s, &[2, 0, 2])?;
            let sc = t.scatter_rows(g, &[1, 3, 0], 5)?;
            probe(t, sc, 8)
        }),
        ("reshape_transpose_mean", vec![("a", vec![2, 6])], |t, ps| {
            let a = p(t, ps, "a")?;
            let r = t.reshape(a, &[3, 4])?;
            let tr = t.transpose(r)?;
            let m = t.mean_rows(tr);
            let s = probe(t, m, 9)?;
            let whole = t.mean(tr);
            t.add(s, whole)
        }),
    ]
}

/// Every tape op against central differences on random inputs.
pub fn op_gradient_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (k, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let mut ps = ParamSet::new();
        for (j, (n, shape)) in shapes.iter().enumerate() {
            ps.insert(*n, random(shape, 100 + 10 * k as u64 + j as u64));
        }
        let err = grad_check(&ps, STEP, None, f)?;
        out.push(Check::at_most(format!("op {name}"), err, OP_TOLERANCE));
    }
    out.extend(layer_gradient_checks()?);
    Ok(out)
}

fn layer_gradient_checks() -> Result<Vec<Check>> {
    let mut ps = ParamSet::new();
    let mut r = rng(5);
    {
        let mut init = Init::new(&mut ps, &mut r);
        init.attention("att", 6, 4, 6);
        init.encoder_layer("enc", 6, 8);
        init.decoder_layer("dec", 6, 4, 8);
    }
    // Non-trivial norms and biases.
    for (name, t) in ps.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".bias") || name.ends_with(".gain") {
            *t = Tensor::normal(t.shape(), 0.5, &mut r);
        }
    }
    let x = random(&[3, 6], 11);
    let ctx = random(&[4, 4], 12);
    let bias = random(&[3, 3], 13);
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    let mut out = Vec::new();
    let err = grad_check(&ps, STEP, Some(8), |t, ps| {
        let (xv, cv, bv) = (t.constant(x.clone()), t.constant(ctx.clone()), t.constant(bias.clone()));
        let a = nn::multi_head_attention(t, ps, "att", xv, cv, cv, Some(&mask), None, 2)?;
        let y = probe(t, a.output, 14)?;
        let e = nn::encoder_layer(t, ps, "enc", xv, Some(&[bv, bv]), 2)?;
        let z = probe(t, e, 15)?;
        t.add(y, z)
    })?;
    out.push(Check::at_most("layer attention+encoder", err, OP_TOLERANCE));
    let err = grad_check(&ps, STEP, Some(8), |t, ps| {
        let (xv, cv) = (t.constant(x.clone()), t.constant(ctx.clone()));
        let d = nn::decoder_layer(t, ps, "dec", xv, cv, 2)?;
        probe(t, d, 16)
    })?;
    out.push(Check::at_most("layer decoder", err, OP_TOLERANCE));
    Ok(out)
}

/// A five-node house, one episode in it, and a small full agent.
pub struct ToyProblem {
    pub agent: Agent,
    pub params: ParamSet,
    pub house: HouseGraph,
    pub episode: Episode,
    pub imagination: ImaginationSet,
}

pub fn toy_config() -> AgentConfig {
    AgentConfig {
        hidden: 8,
        heads: 2,
        lang_layers: 1,
        cross_layers: 1,
        ffn_mult: 2,
        feature_dim: 8,
        visual_heads: 2,
        max_steps: 6,
        ..AgentConfig::default()
    }
}

pub fn toy_problem(seed: u64) -> Result<ToyProblem> {
    let gen = GenConfig {
        feature_dim: 8,
        min_nodes: 5,
        max_nodes: 5,
        ..GenConfig::default()
    };
    let vocab = Vocab::new(gen.num_room_types, gen.num_object_classes);
    let ep_cfg = EpisodeConfig {
        min_hops: 2,
        max_hops: 4,
        ..EpisodeConfig::default()
    };
    let (house, episode) = (0..64)
        .find_map(|k| {
            let house = generate_house(&gen, seed.wrapping_add(k), "toy", Split::Train).ok()?;
            let ep = sample_episode(&house, &ep_cfg, &vocab, seed.wrapping_add(k), "toy-0", Split::Train).ok()?;
            Some((house, ep))
        })
        .ok_or_else(|| Error::Invariant("no toy episode could be generated".into()))?;
    let protos = gen.prototypes();
    let typical: Vec<Vec<usize>> = (0..gen.num_room_types).map(|r| gen.typical_objects(r)).collect();
    let cb_cfg = CodebookConfig {
        samples: 12,
        entries_per_room: 2,
        ..CodebookConfig::default()
    };
    let codebook = build_room_codebook(&protos, &typical, &ROOM_NAMES[..gen.num_room_types], &cb_cfg)?;
    let agent = Agent::new(
        AgentConfig {
            vocab_size: vocab.len(),
            init_seed: seed,
            codebook: CodebookKind::Visual,
            ..toy_config()
        },
        Some(codebook),
    )?;
    let mut params = agent.init_params()?;
    // Zero-initialised tables and small heads would hide their gradients.
    let mut r = rng(seed ^ 0x5eed);
    for (name, t) in params.iter_mut() {
        if name == "gasa.bias" || name.starts_with("layout.") {
            *t = Tensor::normal(t.shape(), 0.3, &mut r);
        }
    }
    let imagination = imagine_episode(&episode, &vocab, &protos, 0.2, seed)?;
    Ok(ToyProblem {
        agent,
        params,
        house,
        episode,
        imagination,
    })
}

/// Instruction encoder, node embedding, graph-aware attention, dreamer and
/// object grounding of the toy agent, each against central differences.
pub fn model_gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let toy = toy_problem(seed)?;
    let cfg = &toy.agent.config;
    let obs = observe(&toy.house, toy.episode.start)?;
    let objects: Vec<Vec<f64>> = obs.objects.iter().map(|o| o.feature.clone()).collect();
    let mut map = TopoMap::new();
    let nb_pos: Vec<[f64; 2]> = obs.neighbors.iter().map(|n| toy.house.nodes[n.node].position).collect();
    map.update(&obs, 1, &vec![0.1; cfg.feature_dim], toy.house.nodes[obs.node].position, &nb_pos)?;
    let visual = random(&[map.len(), cfg.feature_dim], 21);
    let imag = Tensor::from_rows(&toy.imagination.vectors)?;
    let tokens = toy.episode.instruction.clone();
    let mut out = Vec::new();
    let mut check = |name: &str, f: &dyn Fn(&mut Tape, &ParamSet) -> Result<Var>| -> Result<()> {
        let err = grad_check(&toy.params, STEP, Some(6), f)?;
        out.push(Check::at_most(format!("model {name}"), err, OP_TOLERANCE));
        Ok(())
    };
    check("instruction encoder", &|t, ps| {
        let l = encode_instruction(t, ps, cfg, &tokens)?;
        Ok(probe(t, l, 31)?)
    })?;
    check("local visual fusion", &|t, ps| {
        let (v, o) = fuse_local_visuals(t, ps, cfg, &obs.panorama, &objects)?;
        let a = probe(t, v, 32)?;
        let o = o.ok_or_else(|| Error::Invariant("toy start has no objects".into()))?;
        let b = probe(t, o, 33)?;
        Ok(t.add(a, b)?)
    })?;
    check("node embedding + graph attention", &|t, ps| {
        let v = t.constant(visual.clone());
        let nodes = embed_nodes(t, ps, cfg, &map, v)?;
        let g = gasa(t, ps, cfg, nodes, &hop_buckets(&map))?;
        Ok(probe(t, g, 34)?)
    })?;
    check("dreamer", &|t, ps| {
        let glo = t.constant(random(&[map.len() + 1, cfg.hidden], 35));
        let im = t.constant(imag.clone());
        let (hat, s) = dreamer(t, ps, cfg, glo, im)?;
        let a = probe(t, hat, 36)?;
        let b = probe(t, s, 37)?;
        Ok(t.add(a, b)?)
    })?;
    check("object grounding loss", &|t, ps| {
        let o = t.constant(random(&[3, cfg.feature_dim], 38));
        let s = ground_objects(t, ps, o)?;
        Ok(t.cross_entropy(s, &[1], None)?)
    })?;
    Ok(out)
}

/// All six warmup losses over a teacher-forced toy episode.
pub fn end_to_end_gradient_check(seed: u64) -> Result<Check> {
    let toy = toy_problem(seed)?;
    let terms = Terms::warmup(&toy.agent, Default::default());
    let err = grad_check(&toy.params, STEP, Some(4), |t, ps| {
        let l = episode_loss(
            t,
            ps,
            &toy.agent,
            &toy.episode,
            &toy.house,
            Some(&toy.imagination),
            Control::Teacher,
            terms,
            seed,
        )?;
        Ok::<Var, Error>(l.total)
    })?;
    Ok(Check::at_most(
        format!("end-to-end warmup loss ({} nodes)", toy.house.len()),
        err,
        END_TO_END_TOLERANCE,
    ))
}

fn simple_path_minimum(adj: &[Vec<(usize, f64)>], from: usize, to: usize) -> Option<f64> {
    fn go(adj: &[Vec<(usize, f64)>], u: usize, to: usize, seen: &mut [bool], len: f64, best: &mut Option<f64>) {
        if u == to {
            *best = Some(best.map_or(len, |b: f64| b.min(len)));
            return;
        }
        for &(v, w) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                go(adj, v, to, seen, len + w, best);
                seen[v] = false;
            }
        }
    }
    let mut seen = vec![false; adj.len()];
    seen[from] = true;
    let mut best = None;
    go(adj, from, to, &mut seen, 0.0, &mut best);
    best
}

/// Shortest-path lengths against simple-path enumeration. Half-integer
/// edge lengths keep every sum exact, so lengths must agree bit for bit.
pub fn planner_oracle(graphs: usize, seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..graphs {
        let n = r.gen_range(2..=15);
        let mut adj = vec![Vec::new(); n];
        let mut g = PlanGraph::new();
        (0..n).for_each(|u| g.add_node(u));
        let density = r.gen_range(0.1..0.4);
        for u in 0..n {
            for v in u + 1..n {
                if r.gen_bool(density) {
                    let w = r.gen_range(1..6) as f64 * 0.5;
                    adj[u].push((v, w));
                    adj[v].push((u, w));
                    g.add_edge(u, v, w);
                }
            }
        }
        let (a, b) = (r.gen_range(0..n), r.gen_range(0..n));
        let plan = dijkstra_plan(&g, a, b)?;
        let ok = match simple_path_minimum(&adj, a, b) {
            None => plan.path().is_none(),
            Some(best) => {
                let walked = plan.path().map(|p| {
                    p.windows(2).map(|w| g.edge_length(w[0], w[1]).unwrap_or(f64::NAN)).sum::<f64>()
                });
                plan.length() == Some(best) && walked == Some(best)
            }
        };
        mismatches += usize::from(!ok);
    }
    Ok(Check::at_most(format!("planner vs enumeration ({graphs} graphs)"), mismatches as f64, 0.0))
}

/// Random trajectories (a third follow the gold path) with random object
/// guesses, for metric checks.
pub fn random_trajectories(count: usize, seed: u64) -> Result<Vec<(HouseGraph, Episode, Trajectory)>> {
    let gen = GenConfig::default();
    let vocab = Vocab::new(gen.num_room_types, gen.num_object_classes);
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(count);
    let mut k = 0u64;
    while out.len() < count {
        k += 1;
        let house = generate_house(&gen, seed.wrapping_mul(31).wrapping_add(k), "h", Split::ValUnseen)?;
        let Ok(ep) = sample_episode(&house, &EpisodeConfig::default(), &vocab, k, "e", Split::ValUnseen) else {
            continue;
        };
        let mut nodes = if r.gen_bool(1.0 / 3.0) {
            ep.gold_path.clone()
        } else {
            vec![ep.start]
        };
        for _ in 0..r.gen_range(0..8) {
            let nbs = house.neighbors(*nodes.last().expect("non-empty"));
            nodes.push(nbs[r.gen_range(0..nbs.len())].0);
        }
        let end = *nodes.last().expect("non-empty");
        let predicted_object = match r.gen_range(0..3) {
            0 => None,
            1 => Some(PredictedObject {
                class: house.nodes[ep.goal].objects[ep.target_object].class,
                node: ep.goal,
            }),
            _ => house.nodes[end].objects.first().map(|o| PredictedObject { class: o.class, node: end }),
        };
        let traj = Trajectory {
            episode_id: ep.id.clone(),
            stop_step: nodes.len(),
            nodes,
            predicted_object,
            layout: Vec::new(),
        };
        out.push((house, ep, traj));
    }
    Ok(out)
}

/// Metric values recomputed from positions and the raw edge list.
pub fn reference_metrics(house: &HouseGraph, ep: &Episode, traj: &Trajectory) -> [f64; 6] {
    let edge = |a: usize, b: usize| {
        house
            .edges
            .iter()
            .find(|e| (e.a == a && e.b == b) || (e.a == b && e.b == a))
            .map_or(f64::NAN, |e| e.length)
    };
    let mut tl = 0.0;
    for w in traj.nodes.windows(2) {
        tl += edge(w[0], w[1]);
    }
    let near = |n: usize| {
        let (p, q) = (house.nodes[n].position, house.nodes[ep.goal].position);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() < SUCCESS_RADIUS
    };
    let last = traj.nodes[traj.nodes.len() - 1];
    let sr = if near(last) { 1.0 } else { 0.0 };
    let osr = if traj.nodes.iter().any(|&n| near(n)) { 1.0 } else { 0.0 };
    let w = ep.gold_length / if tl > ep.gold_length { tl } else { ep.gold_length };
    let right = traj.predicted_object.is_some_and(|p| {
        p.node == ep.goal && p.class == house.nodes[ep.goal].objects[ep.target_object].class
    });
    let rgs = if sr == 1.0 && right { 1.0 } else { 0.0 };
    [tl, sr, osr, sr * w, rgs, rgs * w]
}

fn metric_row(m: &EpisodeMetrics) -> [f64; 6] {
    [m.tl, m.sr, m.osr, m.spl, m.rgs, m.rgspl]
}

/// `score_episode` against the reference formulas, exact equality.
pub fn metric_oracle(count: usize, seed: u64) -> Result<Check> {
    let mut mismatches = 0;
    for (house, ep, traj) in random_trajectories(count, seed)? {
        let got = score_episode(&traj, &ep, &house, SUCCESS_RADIUS)?;
        mismatches += usize::from(metric_row(&got) != reference_metrics(&house, &ep, &traj));
    }
    Ok(Check::at_most(format!("metrics vs reference ({count} trajectories)"), mismatches as f64, 0.0))
}

/// `SPL ≤ SR` and `RGSPL ≤ RGS ≤ SR ≤ OSR` row-wise.
pub fn metric_identities(count: usize, seed: u64) -> Result<Check> {
    let mut violations = 0;
    for (house, ep, traj) in random_trajectories(count, seed)? {
        let m = score_episode(&traj, &ep, &house, SUCCESS_RADIUS)?;
        violations += usize::from(!m.identities_hold());
    }
    Ok(Check::at_most(format!("metric identities ({count} trajectories)"), violations as f64, 0.0))
}

/// k-means on n=20, k=3 against exhaustive scans: nearest-centroid
/// assignment, centroid = member mean, representative = nearest member.
pub fn kmeans_oracle(trials: usize, seed: u64) -> Result<Check> {
    let mut r = rng(seed);
    let mut failures = 0;
    for trial in 0..trials {
        let points: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let km = kmeans(&points, 3, trial as u64, 100)?;
        let nearest_ok = points.iter().zip(&km.assignments).all(|(p, &a)| {
            let own = sq_dist(p, &km.centroids[a]);
            km.centroids.iter().all(|c| own <= sq_dist(p, c))
        });
        let means_ok = km.centroids.iter().enumerate().all(|(c, cen)| {
            let members: Vec<&Vec<f64>> =
                points.iter().zip(&km.assignments).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            !members.is_empty()
                && (0..cen.len()).all(|j| {
                    let mean = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                    (mean - cen[j]).abs() < 1e-12
                })
        });
        let reps_ok = km.representatives(&points).iter().enumerate().all(|(c, &rep)| {
            let best = (0..points.len())
                .filter(|&i| km.assignments[i] == c)
                .min_by(|&i, &j| {
                    sq_dist(&points[i], &km.centroids[c]).total_cmp(&sq_dist(&points[j], &km.centroids[c]))
                });
            best == Some(rep)
        });
        failures += usize::from(!(nearest_ok && means_ok && reps_ok));
    }
    Ok(Check::at_most(format!("k-means vs exhaustive ({trials} trials)"), failures as f64, 0.0))
}

/// Gradient checks, then the oracle suites.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = op_gradient_checks()?;
    out.extend(model_gradient_checks(seed)?);
    out.push(end_to_end_gradient_check(seed)?);
    out.push(planner_oracle(100, seed)?);
    out.push(metric_oracle(200, seed)?);
    out.push(metric_identities(1000, seed)?);
    out.push(kmeans_oracle(20, seed)?);
    Ok(out)
}
