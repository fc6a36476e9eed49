//! Warmup on teacher rollouts with auxiliary tasks, then DAgger-style
//! imitation with a decaying teacher mixture. Gradients of a batch are
//! reduced in episode order, so results do not depend on thread count.

mod losses;

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{episode_loss, EpisodeLoss, LossValues, LossWeights, Terms, MLM_RATE};

use crate::agent::{Agent, Control, RolloutOptions};
use crate::codebook::{
    build_room_codebook, id_hash, imagine_episode, Codebook, CodebookConfig, CodebookKind,
    ImaginationSet,
};
use crate::env::{mix_seed, Dataset, Episode, Split, ROOM_NAMES};
use crate::eval::{evaluate, parallel_map};
use crate::tensor::{AdamW, AdamWConfig, Grads, ParamSet, Tape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Dagger,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Dagger => "dagger",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Validate every this many iterations; 0 disables validation.
    pub val_every: usize,
    /// Stop after this many validations without a new best; 0 never stops.
    pub patience: usize,
    /// Cap on episodes per validation split; 0 uses all.
    pub val_episodes: usize,
    /// Per-epoch decay of the teacher probability in DAgger.
    pub beta_decay: f64,
    /// Iterations per DAgger epoch; 0 means one pass over the train split.
    pub epoch_iters: usize,
    /// DAgger takes the argmax instead of sampling when not following the teacher.
    pub greedy_rollouts: bool,
    pub weights: LossWeights,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::warmup()
    }
}

impl TrainConfig {
    pub fn warmup() -> Self {
        Self {
            iterations: 5000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            clip_norm: 5.0,
            val_every: 250,
            patience: 10,
            val_episodes: 0,
            beta_decay: 0.95,
            epoch_iters: 0,
            greedy_rollouts: false,
            weights: LossWeights::default(),
            seed: 0,
            threads: 1,
        }
    }

    pub fn dagger() -> Self {
        Self {
            iterations: 3000,
            batch_size: 4,
            lr: 3e-4,
            ..Self::warmup()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Warmup => Self::warmup(),
            Stage::Dagger => Self::dagger(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.weights.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.beta_decay) {
            return bad("beta_decay must lie in [0, 1]");
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    /// Teacher probability at a DAgger iteration (0-based).
    pub fn beta_at(&self, iteration: usize, train_episodes: usize) -> f64 {
        let epoch_iters = if self.epoch_iters > 0 {
            self.epoch_iters
        } else {
            train_episodes.div_ceil(self.batch_size).max(1)
        };
        self.beta_decay.powi((iteration / epoch_iters) as i32)
    }
}

/// Greedy validation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub seen_sr: f64,
    pub unseen_sr: f64,
    pub unseen_spl: f64,
    pub unseen_rgs: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub beta: Option<f64>,
    pub grad_norm: f64,
    pub losses: LossValues,
    pub val: Option<Validation>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters with the best val-unseen SR (the final ones if never validated).
    pub best: ParamSet,
    pub best_iteration: usize,
    pub best_unseen_sr: Option<f64>,
    pub iterations_run: usize,
    pub history: Vec<LogRecord>,
}

/// Imagination sets for `episodes`, keyed by episode id.
pub fn imaginations_for(
    data: &Dataset,
    episodes: &[Episode],
    sigma: f64,
    seed: u64,
) -> Result<BTreeMap<String, ImaginationSet>> {
    let vocab = data.vocab();
    let protos = data.config.house.prototypes();
    episodes
        .iter()
        .map(|ep| Ok((ep.id.clone(), imagine_episode(ep, &vocab, &protos, sigma, seed)?)))
        .collect()
}

/// Imagination sets for every episode of every split.
pub fn all_imaginations(data: &Dataset, sigma: f64, seed: u64) -> Result<BTreeMap<String, ImaginationSet>> {
    let mut out = BTreeMap::new();
    for eps in data.episodes.values() {
        out.extend(imaginations_for(data, eps, sigma, seed)?);
    }
    Ok(out)
}

/// The room codebook a variant reads, built from the dataset's prototypes.
/// The classifier variant has none.
pub fn codebook_for(data: &Dataset, kind: CodebookKind, cfg: &CodebookConfig) -> Result<Option<Codebook>> {
    let g = &data.config.house;
    let protos = g.prototypes();
    let labels = &ROOM_NAMES[..g.num_room_types];
    Ok(match kind {
        CodebookKind::Visual => {
            let typical: Vec<Vec<usize>> = (0..g.num_room_types).map(|r| g.typical_objects(r)).collect();
            Some(build_room_codebook(&protos, &typical, labels, cfg)?)
        }
        CodebookKind::Textual => Some(Codebook::textual(&protos, labels)),
        CodebookKind::Classifier => None,
    })
}

/// Mean loss and gradient of a batch. Episode `k` of the batch is rolled out
/// with seed `mix_seed(seed, 31, k)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    agent: &Agent,
    params: &ParamSet,
    data: &Dataset,
    imaginations: &BTreeMap<String, ImaginationSet>,
    batch: &[&Episode],
    control: Control,
    terms: Terms,
    seed: u64,
    threads: usize,
) -> Result<(Grads, Vec<LossValues>)> {
    let indexed: Vec<(usize, &Episode)> = batch.iter().copied().enumerate().collect();
    let scale = 1.0 / batch.len().max(1) as f64;
    let per = parallel_map(&indexed, threads, |&(k, ep)| {
        let house = data.house(&ep.house_id)?;
        let mut tape = Tape::new();
        let l = episode_loss(
            &mut tape,
            params,
            agent,
            ep,
            house,
            imaginations.get(&ep.id),
            control,
            terms,
            mix_seed(seed, 31, k as u64),
        )?;
        let scaled = tape.scale(l.total, scale);
        Ok((tape.backward(scaled)?, l.values))
    })?;
    let mut grads = Grads::new();
    let mut values = Vec::with_capacity(per.len());
    for (g, v) in per {
        grads.accumulate(&g);
        values.push(v);
    }
    grads.fill_missing(params);
    Ok((grads, values))
}

fn capped(eps: &[Episode], cap: usize) -> &[Episode] {
    if cap == 0 {
        eps
    } else {
        &eps[..cap.min(eps.len())]
    }
}

/// Greedy SR/SPL/RGS on the validation splits.
pub fn validate(
    agent: &Agent,
    params: &ParamSet,
    data: &Dataset,
    imaginations: &BTreeMap<String, ImaginationSet>,
    cap: usize,
    threads: usize,
) -> Result<Validation> {
    let opts = RolloutOptions::greedy();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let seen = evaluate(agent, params, data, capped(data.episodes(Split::ValSeen), cap), imaginations, &opts, threads)?;
    let unseen = evaluate(agent, params, data, capped(data.episodes(Split::ValUnseen), cap), imaginations, &opts, threads)?;
    let col = |run: &crate::eval::EvalRun, f: fn(&crate::eval::EpisodeMetrics) -> f64| {
        mean(&run.metrics.iter().map(f).collect::<Vec<_>>())
    };
    Ok(Validation {
        seen_sr: col(&seen, |m| m.sr),
        unseen_sr: col(&unseen, |m| m.sr),
        unseen_spl: col(&unseen, |m| m.spl),
        unseen_rgs: col(&unseen, |m| m.rgs),
    })
}

/// Train `params` in place for one stage on `train` episodes. Each
/// iteration's record is written as a JSON line to `log`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    stage: Stage,
    agent: &Agent,
    params: &mut ParamSet,
    data: &Dataset,
    train: &[Episode],
    imaginations: &BTreeMap<String, ImaginationSet>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 41, stage as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut best = params.clone();
    let mut best_iteration = 0;
    let mut best_sr: Option<f64> = None;
    let mut stale = 0;
    let mut history = Vec::new();
    let mut iterations_run = 0;
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (control, terms, beta) = match stage {
            Stage::Warmup => (Control::Teacher, Terms::warmup(agent, cfg.weights), None),
            Stage::Dagger => {
                let beta = cfg.beta_at(it, train.len());
                let control = if cfg.greedy_rollouts {
                    Control::MixtureGreedy { beta }
                } else {
                    Control::Mixture { beta }
                };
                (control, Terms::imitation(agent, cfg.weights), Some(beta))
            }
        };
        let seed = mix_seed(cfg.seed, 43 + stage as u64, it as u64);
        let (mut grads, values) =
            batch_gradients(agent, params, data, imaginations, &batch, control, terms, seed, cfg.threads)?;
        let losses = LossValues::mean(&values);
        let grad_norm = grads.global_norm();
        if !losses.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: it + 1,
                batch: batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(","),
            });
        }
        if cfg.clip_norm > 0.0 {
            grads.clip_global_norm(cfg.clip_norm);
        }
        opt.step(params, &grads)?;
        iterations_run = it + 1;
        let val = if cfg.val_every > 0 && iterations_run % cfg.val_every == 0 {
            let v = validate(agent, params, data, imaginations, cfg.val_episodes, cfg.threads)?;
            if best_sr.is_none_or(|b| v.unseen_sr > b) {
                best_sr = Some(v.unseen_sr);
                best = params.clone();
                best_iteration = iterations_run;
                stale = 0;
            } else {
                stale += 1;
            }
            Some(v)
        } else {
            None
        };
        let record = LogRecord {
            stage,
            iteration: iterations_run,
            beta,
            grad_norm,
            losses,
            val,
        };
        serde_json::to_writer(&mut *log, &record)?;
        log.write_all(b"\n")?;
        history.push(record);
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }
    if best_sr.is_none() {
        best = params.clone();
        best_iteration = iterations_run;
    }
    Ok(TrainReport {
        best,
        best_iteration,
        best_unseen_sr: best_sr,
        iterations_run,
        history,
    })
}

/// Stable per-episode seed used by callers that need one outside a batch.
pub fn episode_seed(seed: u64, episode_id: &str) -> u64 {
    mix_seed(seed, 47, id_hash(episode_id))
}
