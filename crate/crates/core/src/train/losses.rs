use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{encode_instruction, rollout, Agent, Control, Rollout, RolloutOptions};
use crate::codebook::ImaginationSet;
use crate::env::{Episode, HouseGraph, MASK_ID};
use crate::tensor::nn;
use crate::tensor::{ParamSet, Tape, Var};
use crate::Result;

/// Fraction of instruction tokens masked for the language task.
pub const MLM_RATE: f64 = 0.15;

/// Named scalar losses of one episode (or a batch mean). A component is
/// `None` when it had no support.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mlm: Option<f64>,
    pub mrc: Option<f64>,
    pub og: Option<f64>,
    pub lp: Option<f64>,
    pub d: Option<f64>,
    pub dsap: Option<f64>,
    pub total: f64,
    /// Steps whose dreamer loss was skipped for lack of a frontier target.
    pub skipped_d: usize,
}

impl LossValues {
    pub fn parts(&self) -> [Option<f64>; 6] {
        [self.mlm, self.mrc, self.og, self.lp, self.d, self.dsap]
    }

    /// Mean of each component over the entries that have it.
    pub fn mean(items: &[LossValues]) -> LossValues {
        let avg = |f: fn(&LossValues) -> Option<f64>| {
            let v: Vec<f64> = items.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        LossValues {
            mlm: avg(|l| l.mlm),
            mrc: avg(|l| l.mrc),
            og: avg(|l| l.og),
            lp: avg(|l| l.lp),
            d: avg(|l| l.d),
            dsap: avg(|l| l.dsap),
            total: items.iter().map(|l| l.total).sum::<f64>() / items.len().max(1) as f64,
            skipped_d: items.iter().map(|l| l.skipped_d).sum(),
        }
    }
}

/// A scalar loss on the tape and its components.
pub struct EpisodeLoss {
    pub total: Var,
    pub values: LossValues,
    pub rollout: Rollout,
}

fn mean_of(tape: &mut Tape, parts: &[Var]) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let s = tape.add_all(parts)?;
    Ok(Some(tape.scale(s, 1.0 / parts.len() as f64)))
}

/// Weight of each loss term in the total; a zero weight drops the term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mlm: f64,
    pub mrc: f64,
    pub og: f64,
    pub lp: f64,
    pub d: f64,
    pub dsap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            mrc: 1.0,
            og: 1.0,
            lp: 1.0,
            d: 1.0,
            dsap: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.mlm, self.mrc, self.og, self.lp, self.d, self.dsap]
    }
}

/// Weights of the terms attached to a rollout; zero means absent.
pub type Terms = LossWeights;

impl LossWeights {
    const NONE: Self = Self {
        mlm: 0.0,
        mrc: 0.0,
        og: 0.0,
        lp: 0.0,
        d: 0.0,
        dsap: 0.0,
    };

    /// The six warmup tasks (layout and dreamer terms follow the variant).
    pub fn warmup(agent: &Agent, w: LossWeights) -> Self {
        Self {
            lp: if agent.config.use_layout { w.lp } else { 0.0 },
            d: if agent.config.use_dreamer { w.d } else { 0.0 },
            ..w
        }
    }

    /// Grounding, layout and action terms for imitation rollouts.
    pub fn imitation(agent: &Agent, w: LossWeights) -> Self {
        Self {
            og: w.og,
            lp: if agent.config.use_layout { w.lp } else { 0.0 },
            dsap: w.dsap,
            ..Self::NONE
        }
    }
}

/// Roll out `episode` under `control` and attach the requested losses.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    tape: &mut Tape,
    params: &ParamSet,
    agent: &Agent,
    episode: &Episode,
    house: &HouseGraph,
    imagination: Option<&ImaginationSet>,
    control: Control,
    terms: Terms,
    seed: u64,
) -> Result<EpisodeLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask_region_at = (terms.mrc > 0.0).then(|| rng.gen_range(1..=episode.gold_path.len().min(agent.config.max_steps)));
    let opts = RolloutOptions {
        control,
        labels: true,
        suppress_stop: false,
        mask_region_at,
        seed: rng.gen(),
    };
    let run = rollout(tape, params, agent, episode, house, imagination, &opts)?;
    let mut values = LossValues::default();
    let mut dsap = Vec::new();
    let mut lp = Vec::new();
    let mut d = Vec::new();
    let mut og = Vec::new();
    let mut mrc = Vec::new();
    for s in &run.steps {
        let label = s.label.expect("labelled rollout");
        if terms.dsap > 0.0 {
            dsap.push(tape.cross_entropy(s.out.logits, &[label], Some(&s.out.mask))?);
        }
        if terms.lp > 0.0 {
            if let Some(layout) = s.out.layout {
                let rooms: Vec<usize> = s.map_nodes.iter().map(|&n| house.nodes[n].room_type).collect();
                lp.push(tape.cross_entropy(layout, &rooms, None)?);
            }
        }
        if terms.d > 0.0 {
            match s.out.dream_logits {
                Some(dl) if label != 0 => {
                    d.push(tape.cross_entropy(dl, &[label], Some(&s.out.frontier_mask))?)
                }
                _ => values.skipped_d += 1,
            }
        }
        if terms.og > 0.0 && s.at_goal {
            if let Some(o) = s.out.objects {
                og.push(tape.cross_entropy(o, &[episode.target_object], None)?);
            }
        }
        if let (true, Some(r)) = (terms.mrc > 0.0, s.masked_region) {
            let row = tape.gather_rows(s.out.global, &[r + 1])?;
            let logits = nn::linear(tape, params, "mrc", row)?;
            mrc.push(tape.cross_entropy(logits, &[house.nodes[s.map_nodes[r]].room_type], None)?);
        }
    }
    let mut parts = Vec::new();
    let mut record = |tape: &mut Tape, v: Option<Var>, weight: f64, slot: &mut Option<f64>| {
        if let Some(v) = v {
            *slot = Some(tape.scalar_value(v));
            parts.push(if weight == 1.0 { v } else { tape.scale(v, weight) });
        }
    };
    let mlm = if terms.mlm > 0.0 { Some(mlm_loss(tape, params, agent, episode, &mut rng)?) } else { None };
    record(tape, mlm, terms.mlm, &mut values.mlm);
    let v = mean_of(tape, &mrc)?;
    record(tape, v, terms.mrc, &mut values.mrc);
    let v = mean_of(tape, &og)?;
    record(tape, v, terms.og, &mut values.og);
    let v = mean_of(tape, &lp)?;
    record(tape, v, terms.lp, &mut values.lp);
    let v = mean_of(tape, &d)?;
    record(tape, v, terms.d, &mut values.d);
    let v = mean_of(tape, &dsap)?;
    record(tape, v, terms.dsap, &mut values.dsap);
    let total = tape.add_all(&parts)?;
    values.total = tape.scalar_value(total);
    Ok(EpisodeLoss {
        total,
        values,
        rollout: run,
    })
}

/// Masked-token prediction on a separately encoded copy of the instruction.
fn mlm_loss(
    tape: &mut Tape,
    params: &ParamSet,
    agent: &Agent,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let tokens = &episode.instruction;
    let mut positions: Vec<usize> = (0..tokens.len()).filter(|_| rng.gen_bool(MLM_RATE)).collect();
    if positions.is_empty() {
        positions.push(rng.gen_range(0..tokens.len()));
    }
    let mut masked = tokens.clone();
    for &p in &positions {
        masked[p] = MASK_ID;
    }
    let enc = encode_instruction(tape, params, &agent.config, &masked)?;
    let rows = tape.gather_rows(enc, &positions)?;
    let logits = nn::linear(tape, params, "mlm", rows)?;
    let targets: Vec<usize> = positions.iter().map(|&p| tokens[p]).collect();
    Ok(tape.cross_entropy(logits, &targets, None)?)
}
