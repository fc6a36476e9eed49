use std::collections::BTreeMap;

use lad::agent::{rollout, Agent, AgentConfig, Control, RolloutOptions};
use lad::codebook::{CodebookKind, ImaginationSet};
use lad::env::{generate_dataset, teacher_next, DataConfig, Dataset, Episode, Split};
use lad::tensor::{Tape, Tensor};
use lad::train::{
    all_imaginations, batch_gradients, codebook_for, episode_loss, train, LossWeights, Stage, TrainConfig, Terms,
};
use lad::Error;

fn data() -> Dataset {
    let cfg = DataConfig {
        train_houses: 4,
        val_unseen_houses: 2,
        train_episodes_per_house: 2,
        val_seen_episodes_per_house: 1,
        val_unseen_episodes_per_house: 2,
        ..DataConfig::default()
    };
    generate_dataset(&cfg, 5).unwrap()
}

fn full_agent(data: &Dataset) -> Agent {
    let cb = codebook_for(data, CodebookKind::Visual, &Default::default()).unwrap();
    Agent::new(AgentConfig::default(), cb).unwrap()
}

fn ims(data: &Dataset) -> BTreeMap<String, ImaginationSet> {
    all_imaginations(data, 0.2, 0).unwrap()
}

fn quick(stage: Stage, iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        val_every: 0,
        ..TrainConfig::for_stage(stage)
    }
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_parts() {
    let data = data();
    let agent = full_agent(&data);
    let params = agent.init_params().unwrap();
    let ims = ims(&data);
    let weights = LossWeights { mlm: 0.5, d: 2.0, ..LossWeights::default() };
    for ep in data.episodes(Split::Train) {
        let house = data.house(&ep.house_id).unwrap();
        for terms in [Terms::warmup(&agent, LossWeights::default()), Terms::warmup(&agent, weights)] {
            let l = episode_loss(&mut Tape::new(), &params, &agent, ep, house, ims.get(&ep.id), Control::Teacher, terms, 3)
                .unwrap();
            let v = &l.values;
            let parts = [v.mlm, v.mrc, v.og, v.lp, v.d, v.dsap];
            let w = terms.as_array();
            let sum: f64 = parts.iter().zip(w).map(|(p, w)| p.map_or(0.0, |p| p * w)).sum();
            assert!((v.total - sum).abs() <= 1e-12, "{} vs {sum}", v.total);
            assert!(v.mlm.is_some() && v.mrc.is_some() && v.lp.is_some() && v.dsap.is_some());
        }
    }
}

#[test]
fn untrained_layout_loss_is_near_chance() {
    let data = data();
    let agent = full_agent(&data);
    let params = agent.init_params().unwrap();
    let ims = ims(&data);
    let k = data.config.house.num_room_types as f64;
    let lp: Vec<f64> = data
        .episodes(Split::Train)
        .iter()
        .map(|ep| {
            let house = data.house(&ep.house_id).unwrap();
            let l = episode_loss(&mut Tape::new(), &params, &agent, ep, house, ims.get(&ep.id), Control::Teacher, Terms::warmup(&agent, LossWeights::default()), 1)
                .unwrap();
            l.values.lp.unwrap()
        })
        .collect();
    let mean = lp.iter().sum::<f64>() / lp.len() as f64;
    assert!((mean - k.ln()).abs() < 0.3, "{mean} vs ln {k}");
}

#[test]
fn warmup_reduces_loss_on_fixed_episodes() {
    let data = data();
    let agent = full_agent(&data);
    let mut params = agent.init_params().unwrap();
    let eps: Vec<Episode> = data.episodes(Split::Train)[..8].to_vec();
    let cfg = TrainConfig { batch_size: 8, iterations: 200, ..quick(Stage::Warmup, 200) };
    let r = train(Stage::Warmup, &agent, &mut params, &data, &eps, &ims(&data), &cfg, &mut std::io::sink()).unwrap();
    let (first, last) = (r.history[0].losses.total, r.history[199].losses.total);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = data();
    let agent = full_agent(&data);
    let init = agent.init_params().unwrap();
    for stage in [Stage::Warmup, Stage::Dagger] {
        let mut params = init.clone();
        let cfg = TrainConfig { lr: 0.0, ..quick(stage, 3) };
        train(stage, &agent, &mut params, &data, data.episodes(Split::Train), &ims(&data), &cfg, &mut std::io::sink())
            .unwrap();
        for (name, t) in init.iter() {
            assert_eq!(params.get(name).unwrap().data(), t.data(), "{name}");
        }
    }
}

#[test]
fn same_seed_gives_an_identical_metrics_log() {
    let data = data();
    let agent = full_agent(&data);
    let run = |stage| {
        let mut params = agent.init_params().unwrap();
        let cfg = TrainConfig { val_every: 2, ..quick(stage, 4) };
        let mut log = Vec::new();
        train(stage, &agent, &mut params, &data, data.episodes(Split::Train), &ims(&data), &cfg, &mut log).unwrap();
        log
    };
    for stage in [Stage::Warmup, Stage::Dagger] {
        let a = run(stage);
        assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 4);
        assert_eq!(a, run(stage));
    }
}

#[test]
fn gradients_do_not_depend_on_the_worker_count() {
    let data = data();
    let agent = full_agent(&data);
    let params = agent.init_params().unwrap();
    let ims = ims(&data);
    let batch: Vec<&Episode> = data.episodes(Split::Train).iter().collect();
    let control = Control::Mixture { beta: 0.5 };
    let terms = Terms::imitation(&agent, LossWeights::default());
    let (g1, v1) = batch_gradients(&agent, &params, &data, &ims, &batch, control, terms, 7, 1).unwrap();
    for threads in [2, 3] {
        let (g, v) = batch_gradients(&agent, &params, &data, &ims, &batch, control, terms, 7, threads).unwrap();
        assert_eq!(v, v1);
        for (name, t) in g1.iter() {
            let other = g.get(name).unwrap();
            for (a, b) in t.data().iter().zip(other.data()) {
                assert!((a - b).abs() <= 1e-10, "{name}");
            }
        }
    }
}

#[test]
fn full_teacher_mixture_reproduces_the_teacher() {
    let data = data();
    let agent = full_agent(&data);
    let params = agent.init_params().unwrap();
    let ims = ims(&data);
    let dsap_only = LossWeights { mlm: 0.0, mrc: 0.0, og: 0.0, lp: 0.0, d: 0.0, dsap: 1.0 };
    for ep in data.episodes(Split::Train) {
        let house = data.house(&ep.house_id).unwrap();
        let opts = |control| RolloutOptions { control, labels: true, seed: 4, ..RolloutOptions::greedy() };
        let teacher = rollout(&mut Tape::new(), &params, &agent, ep, house, ims.get(&ep.id), &opts(Control::Teacher))
            .unwrap();
        for control in [Control::Mixture { beta: 1.0 }, Control::MixtureGreedy { beta: 1.0 }] {
            let r = rollout(&mut Tape::new(), &params, &agent, ep, house, ims.get(&ep.id), &opts(control)).unwrap();
            assert_eq!(r.trajectory, teacher.trajectory);
        }
        let loss = |control| {
            episode_loss(&mut Tape::new(), &params, &agent, ep, house, ims.get(&ep.id), control, dsap_only, 4)
                .unwrap()
                .values
                .dsap
        };
        assert_eq!(loss(Control::Mixture { beta: 1.0 }), loss(Control::Teacher));
    }
}

#[test]
fn mixture_rollout_labels_follow_the_teacher() {
    let data = data();
    let agent = full_agent(&data);
    let params = agent.init_params().unwrap();
    let ims = ims(&data);
    let ep = &data.episodes(Split::Train)[0];
    let house = data.house(&ep.house_id).unwrap();
    let mut checked = 0;
    for seed in 0..20 {
        let opts = RolloutOptions { control: Control::Mixture { beta: 0.3 }, labels: true, seed, ..RolloutOptions::greedy() };
        let r = rollout(&mut Tape::new(), &params, &agent, ep, house, ims.get(&ep.id), &opts).unwrap();
        for s in &r.steps {
            let label = s.label.unwrap();
            if s.node == ep.goal {
                assert_eq!(label, 0);
                continue;
            }
            if !s.out.frontier_mask.contains(&true) {
                assert_eq!(label, 0, "nothing left to explore");
                continue;
            }
            assert!(s.out.frontier_mask[label]);
            let next = teacher_next(house, s.node, ep.goal).unwrap();
            if let Some(i) = s.map_nodes.iter().position(|&n| n == next) {
                if s.out.frontier_mask[i + 1] {
                    assert_eq!(s.map_nodes[label - 1], next);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 20);
}

#[test]
fn non_finite_loss_aborts_with_the_batch_ids() {
    let data = data();
    let agent = full_agent(&data);
    let mut params = agent.init_params().unwrap();
    let name = params.iter().map(|(n, _)| n.clone()).find(|n| n.starts_with("head.")).unwrap();
    let shape = params.get(&name).unwrap().shape().to_vec();
    *params.get_mut(&name).unwrap() = Tensor::filled(&shape, f64::NAN);
    let eps = data.episodes(Split::Train);
    match train(Stage::Warmup, &agent, &mut params, &data, eps, &ims(&data), &quick(Stage::Warmup, 2), &mut std::io::sink()) {
        Err(Error::NonFinite { iteration, batch }) => {
            assert_eq!(iteration, 1);
            assert_eq!(batch.split(',').count(), 4);
            assert!(batch.split(',').all(|id| eps.iter().any(|e| e.id == id)));
        }
        other => panic!("expected NonFinite, got {:?}", other.map(|r| r.iterations_run)),
    }
}
