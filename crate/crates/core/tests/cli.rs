use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lad::cli::manifest::Manifest;

fn lad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lad"))
        .args(args)
        .env_remove("LAD_THREADS")
        .output()
        .expect("spawn lad")
}

fn ok(args: &[&str]) -> String {
    let o = lad(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Manifest {
    Manifest::read(&dir.join("manifest.json")).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    for args in [
        vec!["gen-data", "--bogus"],
        vec!["frobnicate"],
        vec!["gen-data", "--config", "smoke", "--set", "agent.hiden=3", "--out", s(&out)],
        vec!["gen-data", "--config", "no-such-preset-or-file", "--out", s(&out)],
        vec!["eval", "--config", "smoke", "--split", "test", "--data", "d", "--ckpt", "c", "--out", s(&out)],
        vec!["gen-data", "--threads", "0", "--config", "smoke", "--out", s(&out)],
    ] {
        assert_eq!(lad(&args).status.code(), Some(2), "{args:?}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_lad"))
        .args(["gen-data", "--config", "smoke", "--out", s(&out)])
        .env("LAD_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(lad(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = lad(&["build-codebook", "--config", "smoke", "--data", s(&tmp.path().join("nope")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();
    ok(&["gen-data", "--config", "smoke", "--seed", "7", "--out", s(&dirs[0])]);
    ok(&["gen-data", "--config", "smoke", "--seed", "7", "--out", s(&dirs[1])]);
    ok(&["gen-data", "--config", "smoke", "--seed", "8", "--out", s(&dirs[2])]);
    let (a, b, c) = (manifest(&dirs[0]), manifest(&dirs[1]), manifest(&dirs[2]));
    assert_eq!(a.outputs, b.outputs);
    assert_ne!(a.outputs, c.outputs);
    let names: Vec<&str> = a.outputs.iter().map(|d| d.path.as_str()).collect();
    for split in ["train", "val-seen", "val-unseen"] {
        assert!(names.contains(&format!("episodes.{split}.jsonl").as_str()), "{names:?}");
    }
    assert!(names.contains(&"houses.train.jsonl"));
}

#[test]
fn full_pipeline_writes_manifests_that_rerun_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let cfg = ["--config", "smoke", "--seed", "3"];
    let with = |args: &[&str]| -> Vec<String> { args.iter().chain(&cfg).map(|a| a.to_string()).collect() };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["gen-data", "--out", s(&p("data"))]));
    run(with(&["build-codebook", "--data", s(&p("data")), "--out", s(&p("cb"))]));
    let mut im_args = Vec::new();
    for split in ["train", "val-seen", "val-unseen"] {
        let dir = p(&format!("im-{split}"));
        run(with(&["imagine", "--episodes", s(&p("data").join(format!("episodes.{split}.jsonl"))), "--out", s(&dir)]));
        im_args.push("--imaginations".to_string());
        im_args.push(dir.join("imaginations.jsonl").display().to_string());
    }
    let model = |extra: &[&str]| -> Vec<String> {
        let mut v = with(extra);
        v.extend(["--data".into(), s(&p("data")).into(), "--codebook".into(), s(&p("cb").join("codebook.bin")).into()]);
        v.extend(im_args.iter().cloned());
        v
    };
    run(model(&["warmup", "--out", s(&p("warm"))]));
    let warm_best = p("warm").join("best.ckpt");
    run(model(&["dagger", "--init", s(&warm_best), "--out", s(&p("dag"))]));
    let best = p("dag").join("best.ckpt");
    let report = run(model(&["eval", "--ckpt", s(&best), "--split", "val-unseen", "--out", s(&p("eval"))]));
    assert!(report.contains("model.sr = ") && report.contains("random_walk.sr = "), "{report}");
    run(model(&["trace", "--ckpt", s(&best), "--explore", "--out", s(&p("trace"))]));

    let metrics = std::fs::read_to_string(p("warm").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(first["losses"]["dsap"].is_number() && first["losses"]["mlm"].is_number());
    let table = std::fs::read_to_string(p("eval").join("episodes.tsv")).unwrap();
    assert!(table.starts_with("episode\thouse\tsteps\ttl\tsr"));
    assert_eq!(table.lines().count(), 1 + 4);
    let trace = std::fs::read_to_string(p("trace").join("traces.jsonl")).unwrap();
    let step: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    for key in ["episode_id", "map_size", "layout", "lambda", "action"] {
        assert!(step.get(key).is_some(), "{key} missing from {step}");
    }

    let recorded = manifest(&p("dag"));
    assert_eq!(recorded.seed, 3);
    assert!(recorded.inputs.iter().any(|d| d.path.ends_with("best.ckpt")));
    assert!(recorded.config.contains("dagger.iterations = 4"));
    for dir in ["data", "cb", "im-train", "warm", "dag", "eval", "trace"] {
        let out = ok(&["rerun", "--manifest", s(&p(dir).join("manifest.json")), "--threads", "2"]);
        assert!(out.contains("rerun reproduced"), "{dir}: {out}");
        assert_eq!(manifest(&p(&format!("{dir}-rerun"))).outputs, manifest(&p(dir)).outputs, "{dir}");
    }

    // A changed input blocks the replay.
    std::fs::write(&warm_best, b"tampered").unwrap();
    let o = lad(&["rerun", "--manifest", s(&p("dag").join("manifest.json")), "--out", s(&p("dag2"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("inputs changed"));
}

#[test]
fn checkpoints_for_another_variant_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["gen-data", "--config", "smoke", "--out", s(&p("data"))]);
    ok(&["warmup", "--config", "smoke", "--set", "agent.use_layout=false", "--set", "warmup.iterations=1", "--data", s(&p("data")), "--out", s(&p("w"))]);
    let o = lad(&["eval", "--config", "smoke", "--data", s(&p("data")), "--ckpt", s(&p("w").join("best.ckpt")), "--out", s(&p("e"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(out.contains(" 0 failed"), "{out}");
}
