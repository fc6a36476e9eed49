//! Warm up and fine-tune the full agent on a small generated dataset, then
//! report greedy validation scores and per-iteration wall time.

use std::time::Instant;

use lad::agent::{Agent, AgentConfig};
use lad::codebook::CodebookConfig;
use lad::env::{generate_dataset, DataConfig, Split};
use lad::train::{all_imaginations, codebook_for, train, validate, Stage, TrainConfig};

fn main() -> lad::Result<()> {
    let data = generate_dataset(
        &DataConfig {
            train_houses: 40,
            val_unseen_houses: 10,
            ..DataConfig::default()
        },
        7,
    )?;
    let config = AgentConfig::default();
    let codebook = codebook_for(&data, config.codebook, &CodebookConfig::default())?;
    let agent = Agent::new(config, codebook)?;
    let mut params = agent.init_params()?;
    let imaginations = all_imaginations(&data, 0.2, 7)?;
    let iters: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    for stage in [Stage::Warmup, Stage::Dagger] {
        let cfg = TrainConfig {
            iterations: iters,
            val_every: 0,
            ..TrainConfig::for_stage(stage)
        };
        let t0 = Instant::now();
        let report = train(stage, &agent, &mut params, &data, data.episodes(Split::Train), &imaginations, &cfg, &mut std::io::sink())?;
        let last = report.history.last().expect("ran");
        println!(
            "{}: {} iterations, {:.1} ms/iter, final loss {:.3}",
            stage.name(),
            report.iterations_run,
            t0.elapsed().as_secs_f64() * 1e3 / report.iterations_run as f64,
            last.losses.total
        );
    }
    let t0 = Instant::now();
    let v = validate(&agent, &params, &data, &imaginations, 0, 1)?;
    println!(
        "val-seen SR {:.3}  val-unseen SR {:.3} SPL {:.3} RGS {:.3}  ({:.1} s)",
        v.seen_sr,
        v.unseen_sr,
        v.unseen_spl,
        v.unseen_rgs,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
