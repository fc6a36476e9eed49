use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::house::{HouseGraph, NodeId, Split};
use super::planner::{dijkstra_plan, PlanGraph};
use super::world::{room_tokens, Vocab, OBJECT_NAMES, ROOM_NAMES, VERBS};
use super::{EnvError, Result};

/// Instruction templates; `{R}` room, `{V}` verb, `{O}` object.
pub const TEMPLATES: [&str; 5] = [
    "go to the {R} and {V} the {O}",
    "please find the {O} in the {R}",
    "{V} the {O} that is in the {R}",
    "walk to the {R} and {V} the {O} there",
    "in the {R} please {V} the {O}",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub min_hops: usize,
    pub max_hops: usize,
    pub max_retries: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            min_hops: 4,
            max_hops: 7,
            max_retries: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub house_id: String,
    pub split: Split,
    pub start: NodeId,
    pub goal: NodeId,
    /// Index into the goal node's object list.
    pub target_object: usize,
    pub instruction: Vec<usize>,
    pub gold_path: Vec<NodeId>,
    pub gold_length: f64,
}

/// What an instruction asks for, recovered from its tokens alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstructionTarget {
    pub room_type: usize,
    pub object_class: usize,
}

pub fn render_instruction(vocab: &Vocab, template: usize, room: usize, verb: usize, object: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for word in TEMPLATES[template].split(' ') {
        match word {
            "{R}" => ids.extend(room_tokens(ROOM_NAMES[room]).into_iter().map(|w| vocab.id(w))),
            "{V}" => ids.push(vocab.id(VERBS[verb])),
            "{O}" => ids.push(vocab.id(OBJECT_NAMES[object])),
            w => ids.push(vocab.id(w)),
        }
    }
    ids
}

pub fn parse_instruction(tokens: &[usize], vocab: &Vocab) -> Result<InstructionTarget> {
    let room_type = tokens.iter().find_map(|&t| vocab.room_of(t));
    let object_class = tokens.iter().find_map(|&t| vocab.object_of(t));
    match (room_type, object_class) {
        (Some(room_type), Some(object_class)) => Ok(InstructionTarget {
            room_type,
            object_class,
        }),
        _ => Err(EnvError::Instruction(vocab.decode(tokens))),
    }
}

/// Objects at `goal` whose class appears at no other node of the same
/// room type; naming room type + class then identifies the goal uniquely.
fn unique_objects(house: &HouseGraph, goal: NodeId) -> Vec<usize> {
    let g = &house.nodes[goal];
    g.objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            !house.nodes.iter().any(|n| {
                n.id != goal
                    && n.room_type == g.room_type
                    && n.objects.iter().any(|p| p.class == o.class)
            })
        })
        .map(|(k, _)| k)
        .collect()
}

pub fn sample_episode(
    house: &HouseGraph,
    cfg: &EpisodeConfig,
    vocab: &Vocab,
    seed: u64,
    id: &str,
    split: Split,
) -> Result<Episode> {
    if cfg.min_hops < 1 || cfg.min_hops > cfg.max_hops {
        return Err(EnvError::Config("hop range must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = PlanGraph::from_house(house);
    for _ in 0..cfg.max_retries {
        let start = rng.gen_range(0..house.len());
        let mut candidates: Vec<(NodeId, usize, Vec<NodeId>, f64)> = Vec::new();
        for goal in 0..house.len() {
            if goal == start {
                continue;
            }
            let plan = dijkstra_plan(&graph, start, goal)?;
            let (Some(path), Some(length)) = (plan.path(), plan.length()) else {
                continue;
            };
            let hops = path.len() - 1;
            if hops < cfg.min_hops || hops > cfg.max_hops {
                continue;
            }
            for k in unique_objects(house, goal) {
                candidates.push((goal, k, path.to_vec(), length));
            }
        }
        let Some((goal, target_object, gold_path, gold_length)) = candidates.choose(&mut rng).cloned()
        else {
            continue;
        };
        let node = &house.nodes[goal];
        let template = rng.gen_range(0..TEMPLATES.len());
        let verb = rng.gen_range(0..VERBS.len());
        let instruction = render_instruction(
            vocab,
            template,
            node.room_type,
            verb,
            node.objects[target_object].class,
        );
        return Ok(Episode {
            id: id.to_string(),
            house_id: house.id.clone(),
            split,
            start,
            goal,
            target_object,
            instruction,
            gold_path,
            gold_length,
        });
    }
    Err(EnvError::Sampling(format!(
        "no start/goal pair with {}..={} hops in house {} after {} tries",
        cfg.min_hops, cfg.max_hops, house.id, cfg.max_retries
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::house::{generate_house, GenConfig};

    #[test]
    fn instruction_names_room_and_object() {
        let vocab = Vocab::new(8, 16);
        let ids = render_instruction(&vocab, 0, 5, 0, 3);
        let text = vocab.decode(&ids);
        assert!(text.contains("bathroom") && text.contains("mirror"), "{text}");
        let parsed = parse_instruction(&ids, &vocab).unwrap();
        assert_eq!(parsed, InstructionTarget { room_type: 5, object_class: 3 });
    }

    #[test]
    fn template_lengths_within_range() {
        let vocab = Vocab::new(8, 16);
        for t in 0..TEMPLATES.len() {
            for r in 0..8 {
                let n = render_instruction(&vocab, t, r, 0, 0).len();
                assert!((6..=10).contains(&n), "template {t} room {r}: {n}");
            }
        }
    }

    #[test]
    fn unparseable_instruction_errors() {
        let vocab = Vocab::new(8, 16);
        let ids: Vec<usize> = ["go", "to", "the", "bedroom"].iter().map(|w| vocab.id(w)).collect();
        assert!(matches!(parse_instruction(&ids, &vocab), Err(EnvError::Instruction(_))));
    }

    #[test]
    fn episodes_respect_hop_range_and_target() {
        let cfg = GenConfig::default();
        let vocab = Vocab::new(8, 16);
        let ecfg = EpisodeConfig::default();
        for seed in 0..30 {
            let house = generate_house(&cfg, seed, "h", Split::Train).unwrap();
            let ep = sample_episode(&house, &ecfg, &vocab, seed + 100, "e", Split::Train).unwrap();
            let hops = ep.gold_path.len() - 1;
            assert!((ecfg.min_hops..=ecfg.max_hops).contains(&hops));
            assert_eq!(ep.gold_path[0], ep.start);
            assert_eq!(*ep.gold_path.last().unwrap(), ep.goal);
            let goal = &house.nodes[ep.goal];
            let parsed = parse_instruction(&ep.instruction, &vocab).unwrap();
            assert_eq!(parsed.room_type, goal.room_type);
            assert_eq!(parsed.object_class, goal.objects[ep.target_object].class);
        }
    }

    #[test]
    fn impossible_hop_range_is_sampling_error() {
        let cfg = GenConfig {
            min_nodes: 4,
            max_nodes: 4,
            ..Default::default()
        };
        let house = generate_house(&cfg, 1, "h", Split::Train).unwrap();
        let ecfg = EpisodeConfig {
            min_hops: 10,
            max_hops: 12,
            max_retries: 5,
        };
        let err = sample_episode(&house, &ecfg, &Vocab::new(8, 16), 0, "e", Split::Train);
        assert!(matches!(err, Err(EnvError::Sampling(_))));
    }
}
