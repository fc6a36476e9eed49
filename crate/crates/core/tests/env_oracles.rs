use lad::env::{
    dijkstra_plan, generate_house, observe, sample_episode, teacher_next, EpisodeConfig, GenConfig,
    HouseGraph, PlanGraph, Split, TransitionPrior, Vocab,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All-pairs-free Bellman-Ford from `src` over the house edges.
fn bellman_ford(house: &HouseGraph, src: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; house.len()];
    d[src] = 0.0;
    for _ in 0..house.len() {
        let mut changed = false;
        for e in &house.edges {
            for (u, v) in [(e.a, e.b), (e.b, e.a)] {
                if d[u] + e.length < d[v] {
                    d[v] = d[u] + e.length;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    d
}

fn brute_force(adj: &[Vec<(usize, f64)>], from: usize, to: usize) -> Option<f64> {
    fn go(adj: &[Vec<(usize, f64)>], u: usize, to: usize, seen: &mut Vec<bool>, len: f64, best: &mut Option<f64>) {
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

#[test]
fn dijkstra_matches_simple_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(2..=15);
        let mut adj = vec![Vec::new(); n];
        let mut g = PlanGraph::new();
        for u in 0..n {
            g.add_node(u);
        }
        let p = rng.gen_range(0.1..0.4);
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(p) {
                    // integer-ish lengths make ties common
                    let w = rng.gen_range(1..4) as f64 * 0.5;
                    adj[u].push((v, w));
                    adj[v].push((u, w));
                    g.add_edge(u, v, w);
                }
            }
        }
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let plan = dijkstra_plan(&g, a, b).unwrap();
        match brute_force(&adj, a, b) {
            None => assert!(plan.path().is_none()),
            Some(best) => {
                let got = plan.length().unwrap();
                assert!((got - best).abs() < 1e-9, "{got} vs {best}");
                let path = plan.path().unwrap();
                let walked: f64 = path.windows(2).map(|w| g.edge_length(w[0], w[1]).unwrap()).sum();
                assert!((walked - got).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn teacher_walk_is_a_shortest_path() {
    let cfg = GenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..50 {
        let house = generate_house(&cfg, seed, "h", Split::Train).unwrap();
        let start = rng.gen_range(0..house.len());
        let goal = (start + 1 + rng.gen_range(0..house.len() - 1)) % house.len();
        let reference = bellman_ford(&house, goal);
        let mut cur = start;
        let mut walked = 0.0;
        while cur != goal {
            let next = teacher_next(&house, cur, goal).unwrap();
            assert!(reference[next] < reference[cur]);
            walked += house.edge_length(cur, next).unwrap();
            cur = next;
        }
        assert!((walked - reference[start]).abs() < 1e-9);
    }
}

#[test]
fn teacher_small_cases() {
    let house = generate_house(&GenConfig::default(), 3, "h", Split::Train).unwrap();
    let (a, b) = (house.edges[0].a, house.edges[0].b);
    assert_eq!(teacher_next(&house, a, b).unwrap(), b);
    assert!(teacher_next(&house, a, a).is_err());
}

#[test]
fn gold_length_matches_bellman_ford() {
    let cfg = GenConfig::default();
    let vocab = Vocab::new(8, 16);
    let ecfg = EpisodeConfig::default();
    for i in 0..100 {
        let house = generate_house(&cfg, 1000 + i, "h", Split::Train).unwrap();
        let ep = sample_episode(&house, &ecfg, &vocab, i, "e", Split::Train).unwrap();
        let d = bellman_ford(&house, ep.start);
        assert!((ep.gold_length - d[ep.goal]).abs() < 1e-9);
        let plan = dijkstra_plan(&PlanGraph::from_house(&house), ep.start, ep.goal).unwrap();
        assert_eq!(plan.length().unwrap(), ep.gold_length);
        assert!(ep.gold_path.len() >= 3);
    }
}

#[test]
fn door_transitions_follow_the_prior() {
    let mut prior = TransitionPrior::default_prior(8);
    let (bedroom, bathroom) = (4, 5);
    prior.rows[bedroom] = vec![0.0; 8];
    prior.rows[bedroom][bathroom] = 0.9;
    prior.rows[bedroom][0] = 0.1;
    prior.id = "bedroom-bath-0.9".into();
    let cfg = GenConfig {
        transitions: prior.clone(),
        ..Default::default()
    };
    let mut counts = [[0usize; 8]; 8];
    for seed in 0..500 {
        let house = generate_house(&cfg, seed, "h", Split::Train).unwrap();
        for (p, c) in house.room_transitions() {
            counts[p][c] += 1;
        }
    }
    for (p, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total < 200 {
            continue;
        }
        for (c, &n) in row.iter().enumerate() {
            let freq = n as f64 / total as f64;
            assert!(
                (freq - prior.rows[p][c]).abs() <= 0.05,
                "P({c}|{p}) = {freq} over {total}, prior {}",
                prior.rows[p][c]
            );
        }
    }
    let bed_total: usize = counts[bedroom].iter().sum();
    assert!(bed_total >= 200);
}

#[test]
fn observation_matches_house() {
    let cfg = GenConfig::default();
    for seed in 0..20 {
        let house = generate_house(&cfg, seed, "h", Split::Train).unwrap();
        for n in 0..house.len() {
            let obs = observe(&house, n).unwrap();
            assert_eq!(obs.neighbors.len(), house.degree(n));
            assert_eq!(obs.panorama.len(), cfg.sectors);
            for nb in &obs.neighbors {
                assert_eq!(nb.distance, house.edge_length(n, nb.node).unwrap());
                assert!(obs.panorama.contains(&nb.view));
            }
        }
    }
}
