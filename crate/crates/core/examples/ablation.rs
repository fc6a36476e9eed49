//! Module and codebook ablation grids.
//!
//! `cargo run --release --example ablation -- [preset|config] [seed...]`

use lad::config::RunConfig;
use lad::pipeline::ablate;

fn main() -> lad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::load(args.first().map(String::as_str).unwrap_or("smoke"))?;
    if args.len() > 1 {
        cfg.ablate.seeds = args[1..].iter().map(|s| s.parse().expect("seed")).collect();
    }
    let t = std::time::Instant::now();
    let report = ablate(&cfg, |r| println!("[{:>6.0}s] {}", t.elapsed().as_secs_f64(), r.line()))?;
    println!("\n{}", report.to_markdown());
    Ok(())
}
