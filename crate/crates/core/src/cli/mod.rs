//! The `lad` command line: one subcommand per pipeline stage. Every
//! subcommand writes its outputs and a manifest into `--out`; `rerun`
//! replays a manifest and checks the outputs are bit-identical.

pub mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::agent::{RolloutOptions, TraceStep};
use crate::codebook::{Codebook, CodebookKind, ImaginationSet};
use crate::config::RunConfig;
use crate::env::{read_jsonl, write_jsonl, Dataset, Episode, Split, ROOM_NAMES};
use crate::eval::{evaluate, evaluate_random_walk, room_accuracy_by_step, EpisodeMetrics, StepAccuracy, Summary};
use crate::pipeline::{ablate, setup_from, split_episodes, Setup, Variant};
use crate::selftest::run_all;
use crate::tensor::{read_checkpoint, write_checkpoint, ParamSet};
use crate::train::{codebook_for, imaginations_for, train, Stage, TrainReport};
use crate::{Error, Result};
use manifest::{digest_input, digest_outputs, Manifest};

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;
/// Runtime error or failed check.
pub const EXIT_FAILURE: i32 = 1;
/// Bad flags, arguments or config keys.
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "lad", version, about = "Layout-aware navigation agent on synthetic houses")]
pub struct Cli {
    /// Worker threads for rollouts and evaluation (overrides LAD_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every pipeline subcommand.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Common {
    /// Preset name (default, desk, smoke) or config file.
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Inputs of subcommands that run a model.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInputs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Codebook from `build-codebook`; rebuilt from the data when absent.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Imaginations from `imagine`, one file per split; repeatable.
    /// Regenerated from the data when absent.
    #[arg(long)]
    pub imaginations: Vec<PathBuf>,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Command {
    /// Generate houses and episodes for every split.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Build the room codebook named by `agent.codebook`.
    BuildCodebook {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Imagine goal vectors for every episode of an episodes file.
    Imagine {
        #[command(flatten)]
        common: Common,
        /// `episodes.<split>.jsonl` inside a dataset directory.
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Multi-task warmup on teacher trajectories.
    Warmup {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
    },
    /// Imitation on mixture-policy rollouts, from a warmup checkpoint.
    Dagger {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        init: PathBuf,
        /// Follow the argmax instead of sampling when off the teacher.
        #[arg(long)]
        greedy: bool,
    },
    /// Greedy evaluation with a report and a per-episode table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val-unseen", value_parser = parse_split)]
        split: Split,
    },
    /// Train and evaluate the module and codebook grids for every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Per-step records of greedy rollouts and the room accuracy curve.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val-unseen", value_parser = parse_split)]
        split: Split,
        /// Trace only the first N episodes (0 = all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        /// Keep exploring until the horizon instead of stopping.
        #[arg(long)]
        explore: bool,
    },
    /// Gradient checks and oracle suites; exit 1 on any failure.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the checks as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a manifest into a fresh directory and compare outputs.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the original output directory with `-rerun` appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s} (train, val-seen, val-unseen)"))
}

impl Command {
    fn common(&self) -> Option<&Common> {
        match self {
            Command::GenData { common }
            | Command::BuildCodebook { common, .. }
            | Command::Imagine { common, .. }
            | Command::Warmup { common, .. }
            | Command::Dagger { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common }
            | Command::Trace { common, .. } => Some(common),
            Command::Selftest { .. } | Command::Rerun { .. } => None,
        }
    }

    fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::GenData { common }
            | Command::BuildCodebook { common, .. }
            | Command::Imagine { common, .. }
            | Command::Warmup { common, .. }
            | Command::Dagger { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common }
            | Command::Trace { common, .. } => Some(common),
            Command::Selftest { .. } | Command::Rerun { .. } => None,
        }
    }

    /// Every path argument, made absolute so a manifest can be replayed
    /// from any working directory.
    fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = std::path::absolute(&*p)?;
            Ok(())
        };
        let abs_inputs = |i: &mut ModelInputs| -> Result<()> {
            abs(&mut i.data)?;
            if let Some(p) = i.codebook.as_mut() {
                abs(p)?;
            }
            for p in i.imaginations.iter_mut() {
                abs(p)?;
            }
            Ok(())
        };
        if let Some(c) = self.common_mut() {
            abs(&mut c.out)?;
        }
        match self {
            Command::BuildCodebook { data, .. } => abs(data),
            Command::Imagine { episodes, .. } => abs(episodes),
            Command::Warmup { inputs, .. } => abs_inputs(inputs),
            Command::Dagger { inputs, init, .. } => {
                abs_inputs(inputs)?;
                abs(init)
            }
            Command::Eval { inputs, ckpt, .. } | Command::Trace { inputs, ckpt, .. } => {
                abs_inputs(inputs)?;
                abs(ckpt)
            }
            Command::GenData { .. } | Command::Ablate { .. } | Command::Selftest { .. } | Command::Rerun { .. } => {
                Ok(())
            }
        }
    }

    /// Files and directories the command reads.
    fn input_paths(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let push_inputs = |i: &ModelInputs, out: &mut Vec<PathBuf>| {
            out.push(i.data.clone());
            out.extend(i.codebook.clone());
            out.extend(i.imaginations.iter().cloned());
        };
        match self {
            Command::BuildCodebook { data, .. } => out.push(data.clone()),
            Command::Imagine { episodes, .. } => {
                out.push(episodes.clone());
                out.push(data_dir_of(episodes).join("meta.json"));
            }
            Command::Warmup { inputs, .. } => push_inputs(inputs, &mut out),
            Command::Dagger { inputs, init, .. } => {
                push_inputs(inputs, &mut out);
                out.push(init.clone());
            }
            Command::Eval { inputs, ckpt, .. } | Command::Trace { inputs, ckpt, .. } => {
                push_inputs(inputs, &mut out);
                out.push(ckpt.clone());
            }
            Command::GenData { .. } | Command::Ablate { .. } | Command::Selftest { .. } | Command::Rerun { .. } => {}
        }
        out
    }
}

fn data_dir_of(episodes: &Path) -> PathBuf {
    episodes.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Worker count: `--threads`, else `LAD_THREADS`, else the config value.
fn resolve_threads(flag: Option<usize>, config: usize) -> std::result::Result<usize, String> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("LAD_THREADS") {
            Ok(v) => v.trim().parse().map_err(|_| format!("LAD_THREADS={v} is not a count"))?,
            Err(_) => config,
        },
    };
    if n == 0 {
        return Err("thread count must be at least 1".into());
    }
    Ok(n)
}

/// Config named by `common` with `--seed` and `--set` applied.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    let pairs: Vec<(&str, &str)> = common
        .overrides
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("--set {kv}: expected key=value")))
        })
        .collect::<Result<_>>()?;
    cfg.apply(pairs.into_iter().map(|(k, v)| (k, v, 0)))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Parse `argv` (program name first), run, and return the exit status.
/// Diagnostics go to stderr, summaries to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err((code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}

type Failure = (i32, Error);

fn usage(e: impl std::fmt::Display) -> Failure {
    (EXIT_USAGE, Error::Config(e.to_string()))
}

fn failure(e: Error) -> Failure {
    (EXIT_FAILURE, e)
}

fn dispatch(cli: Cli) -> std::result::Result<i32, Failure> {
    let mut command = cli.command;
    match command {
        Command::Selftest { seed, out } => selftest(seed, out.as_deref()).map_err(failure),
        Command::Rerun { manifest, out } => {
            let m = Manifest::read(&manifest).map_err(usage)?;
            let threads = resolve_threads(cli.threads, m.threads).map_err(usage)?;
            rerun(&m, out, threads).map_err(failure)
        }
        _ => {
            let common = command.common().expect("pipeline command").clone();
            let cfg = load_config(&common).map_err(usage)?;
            let threads = resolve_threads(cli.threads, cfg.threads).map_err(usage)?;
            command.absolutize().map_err(failure)?;
            execute(&command, cfg, threads).map_err(failure)?;
            Ok(EXIT_OK)
        }
    }
}

/// Run a pipeline command with a resolved config and write its manifest.
fn execute(command: &Command, mut cfg: RunConfig, threads: usize) -> Result<Manifest> {
    let out = command.common().expect("pipeline command").out.clone();
    std::fs::create_dir_all(&out)?;
    if let Command::Dagger { greedy: true, .. } = command {
        cfg.dagger.greedy_rollouts = true;
    }
    let mut inputs = Vec::new();
    for p in command.input_paths() {
        if !p.exists() {
            return Err(Error::Config(format!("input {} does not exist", p.display())));
        }
        inputs.extend(digest_input(&p)?);
    }
    let snapshot = cfg.to_text()?;
    let seed = cfg.seed;
    cfg.threads = threads;
    let outputs = match command {
        Command::GenData { .. } => gen_data(&cfg, &out)?,
        Command::BuildCodebook { data, .. } => build_codebook(&cfg, data, &out)?,
        Command::Imagine { episodes, .. } => imagine(&cfg, episodes, &out)?,
        Command::Warmup { inputs, .. } => train_stage(&cfg, Stage::Warmup, inputs, None, &out)?,
        Command::Dagger { inputs, init, .. } => train_stage(&cfg, Stage::Dagger, inputs, Some(init), &out)?,
        Command::Eval { inputs, ckpt, split, .. } => eval(&cfg, inputs, ckpt, *split, &out)?,
        Command::Ablate { .. } => ablation(&cfg, &out)?,
        Command::Trace {
            inputs,
            ckpt,
            split,
            limit,
            explore,
            ..
        } => trace(&cfg, inputs, ckpt, *split, *limit, *explore, &out)?,
        Command::Selftest { .. } | Command::Rerun { .. } => unreachable!("handled by dispatch"),
    };
    let mut manifest = Manifest::new(command.clone(), snapshot, seed, threads);
    manifest.inputs = inputs;
    manifest.outputs = digest_outputs(&out, &outputs)?;
    manifest.write(&out)?;
    Ok(manifest)
}

fn rerun(m: &Manifest, out: Option<PathBuf>, threads: usize) -> Result<i32> {
    let changed = m.changed_inputs()?;
    if !changed.is_empty() {
        return Err(Error::Invariant(format!("inputs changed since the run: {}", changed.join(", "))));
    }
    let mut command = m.command.clone();
    let common = command
        .common_mut()
        .ok_or_else(|| Error::Config("manifest does not describe a pipeline command".into()))?;
    let out = match out {
        Some(p) => std::path::absolute(p)?,
        None => {
            let mut s = common.out.clone().into_os_string();
            s.push("-rerun");
            PathBuf::from(s)
        }
    };
    if out == common.out {
        return Err(Error::Config("rerun output directory must differ from the original".into()));
    }
    common.out = out.clone();
    let cfg = RunConfig::parse(&m.config)?;
    let fresh = execute(&command, cfg, threads)?;
    let mut mismatched = 0;
    for (want, got) in m.outputs.iter().zip(&fresh.outputs) {
        let same = want == got;
        mismatched += usize::from(!same);
        println!("{} {}", if same { "identical" } else { "DIFFERS  " }, want.path);
    }
    if m.outputs.len() != fresh.outputs.len() {
        return Err(Error::Invariant(format!(
            "rerun wrote {} files, manifest lists {}",
            fresh.outputs.len(),
            m.outputs.len()
        )));
    }
    if mismatched > 0 {
        return Err(Error::Invariant(format!("{mismatched} output(s) differ from the manifest")));
    }
    println!("rerun reproduced {} output(s) in {}", fresh.outputs.len(), out.display());
    Ok(EXIT_OK)
}

// ---- subcommands ----------------------------------------------------------

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let data = crate::env::generate_dataset(&cfg.data, cfg.seed)?;
    let files = data.write_dir(out)?;
    for split in [Split::Train, Split::ValSeen, Split::ValUnseen] {
        println!("{:<10} {} episodes", split.name(), data.episodes(split).len());
    }
    Ok(files.iter().map(|p| file_name(p)).collect())
}

fn codebook_config(cfg: &RunConfig) -> crate::codebook::CodebookConfig {
    crate::codebook::CodebookConfig {
        seed: cfg.seed,
        ..cfg.codebook.clone()
    }
}

fn room_names(data: &Dataset) -> &'static [&'static str] {
    &ROOM_NAMES[..data.config.house.num_room_types]
}

fn build_codebook(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<String>> {
    let data = Dataset::read_dir(data_dir)?;
    let cb = codebook_for(&data, cfg.agent.codebook, &codebook_config(cfg))?
        .ok_or_else(|| Error::Config("agent.codebook = classifier has no codebook to build".into()))?;
    cb.save(&out.join("codebook.bin"))?;
    println!("{} codebook: {} rooms x {} entries of dim {}", cfg.agent.codebook.name(), cb.rooms, cb.per_room, cb.dim());
    Ok(vec!["codebook.bin".into()])
}

fn imagine(cfg: &RunConfig, episodes: &Path, out: &Path) -> Result<Vec<String>> {
    let data = Dataset::read_dir(&data_dir_of(episodes))?;
    let eps: Vec<Episode> = read_jsonl(episodes)?;
    let ims = imaginations_for(&data, &eps, cfg.imagine.sigma, cfg.seed)?;
    write_jsonl(&out.join("imaginations.jsonl"), ims.values())?;
    println!("{} imagination sets", ims.len());
    Ok(vec!["imaginations.jsonl".into()])
}

fn load_imaginations(paths: &[PathBuf]) -> Result<BTreeMap<String, ImaginationSet>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for s in read_jsonl::<ImaginationSet>(p)? {
            if out.insert(s.episode_id.clone(), s).is_some() {
                return Err(Error::Config(format!("duplicate imagination in {}", p.display())));
            }
        }
    }
    Ok(out)
}

/// Agent, codebook and imaginations for the configured variant.
fn model_setup(cfg: &RunConfig, inputs: &ModelInputs) -> Result<(Dataset, Setup)> {
    let data = Dataset::read_dir(&inputs.data)?;
    let codebook = match (&inputs.codebook, cfg.agent.codebook) {
        (Some(_), CodebookKind::Classifier) => {
            return Err(Error::Config("--codebook given but agent.codebook = classifier".into()))
        }
        (Some(p), _) => Some(Codebook::load(p, room_names(&data))?),
        (None, _) => None,
    };
    let ims = if inputs.imaginations.is_empty() {
        None
    } else {
        Some(load_imaginations(&inputs.imaginations)?)
    };
    let setup = setup_from(cfg, &data, Variant::of(&cfg.agent), cfg.seed, codebook, ims)?;
    if setup.agent.config.use_dreamer {
        if let Some(ep) = data.episodes.values().flatten().find(|e| !setup.imaginations.contains_key(&e.id)) {
            return Err(Error::Config(format!("no imagination for episode {}", ep.id)));
        }
    }
    Ok((data, setup))
}

/// Checkpoint parameters, checked against the agent's parameter table.
fn load_params(setup: &Setup, path: &Path) -> Result<ParamSet> {
    let mut f = std::io::BufReader::new(File::open(path)?);
    let params = read_checkpoint(&mut f)?;
    let expected = setup.agent.init_params()?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => {
                return Err(Error::Config(format!(
                    "checkpoint {name} has shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::Config(format!("checkpoint lacks {name}; was it trained for this variant?"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Config("checkpoint has parameters this variant does not use".into()));
    }
    Ok(params)
}

fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut f, params)?;
    f.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    stage: Stage,
    iterations_run: usize,
    best_iteration: usize,
    best_unseen_sr: Option<f64>,
    final_losses: Option<&'a crate::train::LossValues>,
}

fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    inputs: &ModelInputs,
    init: Option<&PathBuf>,
    out: &Path,
) -> Result<Vec<String>> {
    let (data, setup) = model_setup(cfg, inputs)?;
    let mut params = match init {
        Some(p) => load_params(&setup, p)?,
        None => setup.agent.init_params()?,
    };
    let tcfg = crate::train::TrainConfig {
        seed: cfg.seed,
        threads: cfg.threads,
        ..match stage {
            Stage::Warmup => cfg.warmup.clone(),
            Stage::Dagger => cfg.dagger.clone(),
        }
    };
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let report: TrainReport = train(stage, &setup.agent, &mut params, &data, data.episodes(Split::Train), &setup.imaginations, &tcfg, &mut log)?;
    log.flush()?;
    save_params(&report.best, &out.join("best.ckpt"))?;
    save_params(&params, &out.join("last.ckpt"))?;
    let summary = TrainSummary {
        stage,
        iterations_run: report.iterations_run,
        best_iteration: report.best_iteration,
        best_unseen_sr: report.best_unseen_sr,
        final_losses: report.history.last().map(|r| &r.losses),
    };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "{} finished after {} iterations; best val-unseen SR {} at iteration {}",
        stage.name(),
        report.iterations_run,
        report.best_unseen_sr.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v)),
        report.best_iteration
    );
    Ok(vec!["metrics.jsonl".into(), "best.ckpt".into(), "last.ckpt".into(), "summary.json".into()])
}

#[derive(Serialize, Deserialize)]
struct EvalReport {
    split: Split,
    variant: String,
    model: Summary,
    random_walk: Summary,
}

fn report_text(r: &EvalReport) -> String {
    let mut s = format!("split = {}\nvariant = {}\nepisodes = {}\n", r.split.name(), r.variant, r.model.episodes);
    for (who, m) in [("model", &r.model), ("random_walk", &r.random_walk)] {
        let rows = [
            ("tl", m.mean.tl, m.lower.tl, m.upper.tl),
            ("sr", m.mean.sr, m.lower.sr, m.upper.sr),
            ("osr", m.mean.osr, m.lower.osr, m.upper.osr),
            ("spl", m.mean.spl, m.lower.spl, m.upper.spl),
            ("rgs", m.mean.rgs, m.lower.rgs, m.upper.rgs),
            ("rgspl", m.mean.rgspl, m.lower.rgspl, m.upper.rgspl),
        ];
        for (name, mean, lo, hi) in rows {
            s.push_str(&format!("{who}.{name} = {mean:.4}  # 95% CI [{lo:.4}, {hi:.4}]\n"));
        }
    }
    s
}

fn episode_table(eps: &[Episode], metrics: &[EpisodeMetrics], steps: &[usize]) -> String {
    let mut s = String::from("episode\thouse\tsteps\ttl\tsr\tosr\tspl\trgs\trgspl\n");
    for ((e, m), n) in eps.iter().zip(metrics).zip(steps) {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{}\t{}\t{:.4}\t{}\t{:.4}\n",
            e.id, e.house_id, n, m.tl, m.sr, m.osr, m.spl, m.rgs, m.rgspl
        ));
    }
    s
}

fn eval(cfg: &RunConfig, inputs: &ModelInputs, ckpt: &Path, split: Split, out: &Path) -> Result<Vec<String>> {
    let (data, setup) = model_setup(cfg, inputs)?;
    let params = load_params(&setup, ckpt)?;
    let eps = split_episodes(&data, split, cfg.eval.max_episodes);
    if eps.is_empty() {
        return Err(Error::Config(format!("split {} has no episodes", split.name())));
    }
    let run = evaluate(&setup.agent, &params, &data, eps, &setup.imaginations, &RolloutOptions::greedy(), cfg.threads)?;
    let walk = evaluate_random_walk(&data, eps, cfg.seed)?;
    let report = EvalReport {
        split,
        variant: Variant::of(&cfg.agent).name(),
        model: run.summary(cfg.eval.bootstrap_seed)?,
        random_walk: walk.summary(cfg.eval.bootstrap_seed)?,
    };
    let text = report_text(&report);
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join("report.txt"), &text)?;
    let steps: Vec<usize> = run.traces.iter().map(Vec::len).collect();
    std::fs::write(out.join("episodes.tsv"), episode_table(eps, &run.metrics, &steps))?;
    print!("{text}");
    Ok(vec!["report.json".into(), "report.txt".into(), "episodes.tsv".into()])
}

fn ablation(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let t = std::time::Instant::now();
    let report = ablate(cfg, |r| eprintln!("[{:>6.0}s] {}", t.elapsed().as_secs_f64(), r.line()))?;
    let md = report.to_markdown();
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(vec!["ablation.json".into(), "ablation.md".into()])
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    episode_id: &'a str,
    #[serde(flatten)]
    step: &'a TraceStep,
}

#[derive(Serialize)]
struct RoomCurve {
    split: Split,
    explore: bool,
    episodes: usize,
    steps: Vec<StepAccuracy>,
}

fn trace(
    cfg: &RunConfig,
    inputs: &ModelInputs,
    ckpt: &Path,
    split: Split,
    limit: usize,
    explore: bool,
    out: &Path,
) -> Result<Vec<String>> {
    let (data, setup) = model_setup(cfg, inputs)?;
    let params = load_params(&setup, ckpt)?;
    let eps = split_episodes(&data, split, limit);
    let opts = RolloutOptions {
        suppress_stop: explore,
        ..RolloutOptions::greedy()
    };
    let run = evaluate(&setup.agent, &params, &data, eps, &setup.imaginations, &opts, cfg.threads)?;
    let records = eps
        .iter()
        .zip(&run.traces)
        .flat_map(|(e, steps)| steps.iter().map(|step| TraceRecord { episode_id: &e.id, step }));
    write_jsonl(&out.join("traces.jsonl"), records)?;
    let pairs: Vec<_> = run
        .trajectories
        .iter()
        .zip(eps)
        .map(|(t, e)| Ok((t, data.house(&e.house_id)?)))
        .collect::<Result<_>>()?;
    let curve = RoomCurve {
        split,
        explore,
        episodes: eps.len(),
        steps: room_accuracy_by_step(&pairs),
    };
    std::fs::write(out.join("room_accuracy.json"), serde_json::to_string_pretty(&curve)? + "\n")?;
    for s in &curve.steps {
        println!("step {:>2}  room accuracy {:.3}  ({} trajectories)", s.step, s.accuracy, s.trajectories);
    }
    Ok(vec!["traces.jsonl".into(), "room_accuracy.json".into()])
}

fn selftest(seed: u64, out: Option<&Path>) -> Result<i32> {
    let t = std::time::Instant::now();
    let checks = run_all(seed)?;
    for c in &checks {
        println!(
            "{} {:<48} {:.3e} (limit {:.0e})",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", checks.len(), t.elapsed().as_secs_f64());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("selftest.json"), serde_json::to_string_pretty(&checks)? + "\n")?;
    }
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}
