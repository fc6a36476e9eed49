//! Navigation and grounding metrics, aggregation, the room-recognition
//! curve, the random-walk baseline, and the parallel evaluation harness.

mod metrics;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use metrics::{
    aggregate, random_walk, room_accuracy_by_step, score_episode, EpisodeMetrics, MetricSet,
    PredictedObject, StepAccuracy, Summary, Trajectory, BOOTSTRAP_RESAMPLES, SUCCESS_RADIUS,
};

use crate::agent::{rollout, Agent, RolloutOptions, TraceStep};
use crate::codebook::{id_hash, ImaginationSet};
use crate::env::{mix_seed, Dataset, Episode};
use crate::tensor::{ParamSet, Tape};
use crate::Result;

/// Outputs of evaluating one episode list, in input order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub trajectories: Vec<Trajectory>,
    pub metrics: Vec<EpisodeMetrics>,
    pub traces: Vec<Vec<TraceStep>>,
}

impl EvalRun {
    pub fn summary(&self, seed: u64) -> Result<Summary> {
        aggregate(&self.metrics, seed)
    }
}

/// Roll out every episode (forward only) and score it. Work is split
/// across `threads` workers; results do not depend on the thread count.
pub fn evaluate(
    agent: &Agent,
    params: &ParamSet,
    data: &Dataset,
    episodes: &[Episode],
    imaginations: &BTreeMap<String, ImaginationSet>,
    opts: &RolloutOptions,
    threads: usize,
) -> Result<EvalRun> {
    let one = |ep: &Episode| -> Result<(Trajectory, EpisodeMetrics, Vec<TraceStep>)> {
        let house = data.house(&ep.house_id)?;
        let mut tape = Tape::new();
        let o = RolloutOptions {
            seed: mix_seed(opts.seed, 17, id_hash(&ep.id)),
            ..opts.clone()
        };
        let run = rollout(&mut tape, params, agent, ep, house, imaginations.get(&ep.id), &o)?;
        let m = score_episode(&run.trajectory, ep, house, SUCCESS_RADIUS)?;
        let trace = run.steps.into_iter().map(|s| s.trace).collect();
        Ok((run.trajectory, m, trace))
    };
    let results = parallel_map(episodes, threads, one)?;
    let mut out = EvalRun::default();
    for (t, m, tr) in results {
        out.trajectories.push(t);
        out.metrics.push(m);
        out.traces.push(tr);
    }
    Ok(out)
}

/// Random-walk baseline over the same episodes.
pub fn evaluate_random_walk(data: &Dataset, episodes: &[Episode], seed: u64) -> Result<EvalRun> {
    let mut out = EvalRun::default();
    for ep in episodes {
        let house = data.house(&ep.house_id)?;
        let t = random_walk(ep, house, mix_seed(seed, 23, id_hash(&ep.id)));
        out.metrics.push(score_episode(&t, ep, house, SUCCESS_RADIUS)?);
        out.trajectories.push(t);
        out.traces.push(Vec::new());
    }
    Ok(out)
}

/// Order-preserving map over `items` on up to `threads` scoped workers.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
