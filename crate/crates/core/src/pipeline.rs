//! End-to-end runs shared by the CLI, the examples and the acceptance
//! suite: train one model variant, evaluate it, and run the module and
//! codebook ablation grids.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentConfig, RolloutOptions};
use crate::codebook::{Codebook, CodebookKind, ImaginationSet};
use crate::config::RunConfig;
use crate::env::{generate_dataset, Dataset, Episode, Split};
use crate::eval::{evaluate, evaluate_random_walk, room_accuracy_by_step, EvalRun, StepAccuracy, Summary};
use crate::tensor::ParamSet;
use crate::train::{all_imaginations, codebook_for, train, Stage, TrainReport};
use crate::Result;

/// Which optional modules and room memory a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub layout: bool,
    pub dreamer: bool,
    pub codebook: CodebookKind,
}

impl Variant {
    pub const BASELINE: Variant = Variant::new(false, false, CodebookKind::Visual);
    pub const LAYOUT: Variant = Variant::new(true, false, CodebookKind::Visual);
    pub const DREAMER: Variant = Variant::new(false, true, CodebookKind::Visual);
    pub const FULL: Variant = Variant::new(true, true, CodebookKind::Visual);
    pub const TEXTUAL: Variant = Variant::new(true, true, CodebookKind::Textual);
    pub const CLASSIFIER: Variant = Variant::new(true, true, CodebookKind::Classifier);

    pub const fn new(layout: bool, dreamer: bool, codebook: CodebookKind) -> Self {
        Self {
            layout,
            dreamer,
            codebook,
        }
    }

    /// Rows of the module grid, then the codebook grid (full shared).
    pub fn module_grid() -> [Variant; 4] {
        [Self::BASELINE, Self::LAYOUT, Self::DREAMER, Self::FULL]
    }

    pub fn codebook_grid() -> [Variant; 3] {
        [Self::FULL, Self::TEXTUAL, Self::CLASSIFIER]
    }

    pub fn name(&self) -> String {
        match (self.layout, self.dreamer) {
            (false, false) => "baseline".to_string(),
            (true, false) => "baseline+layout".to_string(),
            (false, true) => "baseline+dreamer".to_string(),
            (true, true) if self.codebook == CodebookKind::Visual => "full".to_string(),
            (true, true) => format!("full/{}", self.codebook.name()),
        }
    }

    /// The variant an agent config describes.
    pub fn of(cfg: &AgentConfig) -> Self {
        Self::new(cfg.use_layout, cfg.use_dreamer, cfg.codebook)
    }

    pub fn apply(&self, cfg: &AgentConfig) -> AgentConfig {
        AgentConfig {
            use_layout: self.layout,
            use_dreamer: self.dreamer,
            codebook: self.codebook,
            ..cfg.clone()
        }
    }
}

/// Everything a variant needs besides its parameters.
pub struct Setup {
    pub agent: Agent,
    pub imaginations: BTreeMap<String, ImaginationSet>,
}

/// Agent (with its codebook) and the imagination cache for `data`.
pub fn setup(cfg: &RunConfig, data: &Dataset, variant: Variant, seed: u64) -> Result<Setup> {
    setup_from(cfg, data, variant, seed, None, None)
}

/// As [`setup`], taking a prebuilt codebook or imagination cache in place
/// of the ones derived from `data` and `seed`.
pub fn setup_from(
    cfg: &RunConfig,
    data: &Dataset,
    variant: Variant,
    seed: u64,
    codebook: Option<Codebook>,
    imaginations: Option<BTreeMap<String, ImaginationSet>>,
) -> Result<Setup> {
    let agent_cfg = AgentConfig {
        init_seed: seed,
        ..variant.apply(&cfg.agent)
    };
    let codebook = match (variant.codebook, codebook) {
        (CodebookKind::Classifier, _) => None,
        (_, Some(cb)) => Some(cb),
        (kind, None) => {
            let codebook_cfg = crate::codebook::CodebookConfig {
                seed,
                ..cfg.codebook.clone()
            };
            codebook_for(data, kind, &codebook_cfg)?
        }
    };
    let imaginations = match (variant.dreamer, imaginations) {
        (false, _) => BTreeMap::new(),
        (true, Some(ims)) => ims,
        (true, None) => all_imaginations(data, cfg.imagine.sigma, seed)?,
    };
    Ok(Setup {
        agent: Agent::new(agent_cfg, codebook)?,
        imaginations,
    })
}

pub struct Trained {
    pub params: ParamSet,
    pub warmup: TrainReport,
    pub dagger: TrainReport,
}

/// Warmup from a fresh initialisation, then DAgger from the best warmup
/// parameters. Returns the best DAgger parameters.
pub fn train_both(
    cfg: &RunConfig,
    data: &Dataset,
    setup: &Setup,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Trained> {
    let train_eps = data.episodes(Split::Train);
    let mut params = setup.agent.init_params()?;
    let wcfg = crate::train::TrainConfig {
        seed,
        threads: cfg.threads,
        ..cfg.warmup.clone()
    };
    let warmup = train(Stage::Warmup, &setup.agent, &mut params, data, train_eps, &setup.imaginations, &wcfg, log)?;
    let mut params = warmup.best.clone();
    let dcfg = crate::train::TrainConfig {
        seed,
        threads: cfg.threads,
        ..cfg.dagger.clone()
    };
    let dagger = train(Stage::Dagger, &setup.agent, &mut params, data, train_eps, &setup.imaginations, &dcfg, log)?;
    Ok(Trained {
        params: dagger.best.clone(),
        warmup,
        dagger,
    })
}

/// The first `cap` episodes of a split (all when `cap` is 0).
pub fn split_episodes(data: &Dataset, split: Split, cap: usize) -> &[Episode] {
    let eps = data.episodes(split);
    if cap == 0 {
        eps
    } else {
        &eps[..cap.min(eps.len())]
    }
}

/// Greedy evaluation of trained parameters.
pub fn evaluate_greedy(
    cfg: &RunConfig,
    data: &Dataset,
    setup: &Setup,
    params: &ParamSet,
    split: Split,
) -> Result<EvalRun> {
    let eps = split_episodes(data, split, cfg.eval.max_episodes);
    evaluate(&setup.agent, params, data, eps, &setup.imaginations, &RolloutOptions::greedy(), cfg.threads)
}

/// Room accuracy by step with stopping suppressed, so every trajectory
/// explores up to the horizon.
pub fn exploration_accuracy(
    cfg: &RunConfig,
    data: &Dataset,
    setup: &Setup,
    params: &ParamSet,
    split: Split,
) -> Result<Vec<StepAccuracy>> {
    let eps = split_episodes(data, split, cfg.eval.max_episodes);
    let opts = RolloutOptions {
        suppress_stop: true,
        ..RolloutOptions::greedy()
    };
    let run = evaluate(&setup.agent, params, data, eps, &setup.imaginations, &opts, cfg.threads)?;
    let pairs: Vec<_> = run
        .trajectories
        .iter()
        .zip(eps)
        .map(|(t, e)| Ok((t, data.house(&e.house_id)?)))
        .collect::<Result<_>>()?;
    Ok(room_accuracy_by_step(&pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub name: String,
    pub seed: u64,
    pub summary: Summary,
    pub warmup_best_iteration: usize,
    pub dagger_best_iteration: usize,
    /// Present for variants with a layout head.
    pub room_accuracy: Vec<StepAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub sr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
    pub per_seed_sr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub split: Split,
    pub random_walk: Vec<Summary>,
    pub runs: Vec<VariantResult>,
    pub module_grid: Vec<GridRow>,
    pub codebook_grid: Vec<GridRow>,
}

impl VariantResult {
    /// One-line summary for progress output.
    pub fn line(&self) -> String {
        let m = &self.summary.mean;
        format!(
            "seed {} {:<20} SR {:.2} SPL {:.2} RGS {:.2} RGSPL {:.2}",
            self.seed,
            self.name,
            100.0 * m.sr,
            100.0 * m.spl,
            100.0 * m.rgs,
            100.0 * m.rgspl
        )
    }
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&GridRow> {
        let name = variant.name();
        self.module_grid.iter().chain(&self.codebook_grid).find(|r| r.name == name)
    }

    pub fn random_walk_sr(&self) -> f64 {
        self.random_walk.iter().map(|s| s.mean.sr).sum::<f64>() / self.random_walk.len().max(1) as f64
    }

    /// Human-readable grids.
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "# Ablation ({} split, seeds {:?})\n\nrandom walk SR {:.2}\n",
            self.split.name(),
            self.seeds,
            100.0 * self.random_walk_sr()
        );
        for (title, rows) in [("Modules", &self.module_grid), ("Codebook", &self.codebook_grid)] {
            s.push_str(&format!("\n## {title}\n\n| variant | SR | SPL | RGS | RGSPL | SR per seed |\n|---|---|---|---|---|---|\n"));
            for r in rows.iter() {
                let per: Vec<String> = r.per_seed_sr.iter().map(|v| format!("{:.2}", 100.0 * v)).collect();
                s.push_str(&format!(
                    "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {} |\n",
                    r.name,
                    100.0 * r.sr,
                    100.0 * r.spl,
                    100.0 * r.rgs,
                    100.0 * r.rgspl,
                    per.join(" / ")
                ));
            }
        }
        s
    }
}

fn grid(runs: &[VariantResult], variants: &[Variant]) -> Vec<GridRow> {
    variants
        .iter()
        .map(|v| {
            let rs: Vec<&VariantResult> = runs.iter().filter(|r| r.variant == *v).collect();
            let n = rs.len().max(1) as f64;
            let mean = |f: fn(&VariantResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            GridRow {
                name: v.name(),
                sr: mean(|r| r.summary.mean.sr),
                spl: mean(|r| r.summary.mean.spl),
                rgs: mean(|r| r.summary.mean.rgs),
                rgspl: mean(|r| r.summary.mean.rgspl),
                per_seed_sr: rs.iter().map(|r| r.summary.mean.sr).collect(),
            }
        })
        .collect()
}

/// Train and evaluate every variant of both grids for every seed. Seed `s`
/// drives data generation, initialisation, batching and imagination.
/// `progress` sees each run as it finishes.
pub fn ablate(cfg: &RunConfig, mut progress: impl FnMut(&VariantResult)) -> Result<AblationReport> {
    let mut variants: Vec<Variant> = Variant::module_grid().to_vec();
    variants.extend(Variant::codebook_grid());
    variants.dedup();
    let split = cfg.eval.split;
    let mut runs = Vec::new();
    let mut random_walk = Vec::new();
    for &seed in &cfg.ablate.seeds {
        let data = generate_dataset(&cfg.data, seed)?;
        let eps = split_episodes(&data, split, cfg.eval.max_episodes);
        random_walk.push(evaluate_random_walk(&data, eps, seed)?.summary(cfg.eval.bootstrap_seed)?);
        for &variant in &variants {
            let s = setup(cfg, &data, variant, seed)?;
            let trained = train_both(cfg, &data, &s, seed, &mut std::io::sink())?;
            let run = evaluate_greedy(cfg, &data, &s, &trained.params, split)?;
            let room_accuracy = if variant.layout {
                exploration_accuracy(cfg, &data, &s, &trained.params, split)?
            } else {
                Vec::new()
            };
            let result = VariantResult {
                variant,
                name: variant.name(),
                seed,
                summary: run.summary(cfg.eval.bootstrap_seed)?,
                warmup_best_iteration: trained.warmup.best_iteration,
                dagger_best_iteration: trained.dagger.best_iteration,
                room_accuracy,
            };
            progress(&result);
            runs.push(result);
        }
    }
    Ok(AblationReport {
        seeds: cfg.ablate.seeds.clone(),
        split,
        random_walk,
        module_grid: grid(&runs, &Variant::module_grid()),
        codebook_grid: grid(&runs, &Variant::codebook_grid()),
        runs,
    })
}
