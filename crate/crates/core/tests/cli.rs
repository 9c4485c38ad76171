//! Command behavior through the library entry points and the binary.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;

use lightst::cli::{create_run_dir, execute, run, Cli, Command};
use lightst::config::RunConfig;
use lightst::data::{load_traffic_csv, SynthConfig};
use lightst::graph::{load_adjacency_csv, GraphOptions};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.nodes = 8;
    cfg.synth.steps = 400;
    cfg.teacher.dim = 4;
    cfg.teacher.epochs = 1;
    cfg.distill.epochs = 1;
    cfg.bench.repeats = 1;
    cfg
}

fn exec(cfg: &RunConfig, root: &Path, cmd: Command) -> PathBuf {
    let dir = create_run_dir(root, cmd.name()).unwrap();
    execute(cfg, &cmd, &dir).unwrap();
    dir
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let root = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let a = exec(&cfg, root.path(), Command::Synth);
    let b = exec(&cfg, root.path(), Command::Synth);
    assert_ne!(a, b);
    for f in ["traffic.csv", "adjacency.csv", "config.toml"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    let traffic = load_traffic_csv(&a.join("traffic.csv"), 5).unwrap();
    assert_eq!((traffic.num_nodes(), traffic.num_steps()), (30, 2016));
    load_adjacency_csv(&a.join("adjacency.csv"), 30, GraphOptions::default()).unwrap();
}

#[test]
fn synthetic_adjacency_has_two_dense_blocks() {
    let root = tempfile::tempdir().unwrap();
    let dir = exec(&RunConfig::default(), root.path(), Command::Synth);
    let g = load_adjacency_csv(&dir.join("adjacency.csv"), 30, GraphOptions::default()).unwrap();
    let synth = SynthConfig::default();
    let (mut within, mut across) = (0usize, 0usize);
    for e in g.edges() {
        if synth.community_of(e.a) == synth.community_of(e.b) {
            within += 1;
        } else {
            across += 1;
        }
    }
    // 2 · C(15, 2) = 210 possible within-block pairs, 15 · 15 = 225 across.
    let dw = within as f64 / 210.0;
    let da = across as f64 / 225.0;
    assert!(
        dw > 0.25 && da < 0.1 && dw > 5.0 * da,
        "within {dw:.3}, across {da:.3}"
    );
}

#[test]
fn eval_refuses_a_mismatched_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let dir = exec(&cfg, root.path(), Command::TrainTeacher);
    let ckpt = dir.join("teacher.ckpt");

    let ok = exec(
        &cfg,
        root.path(),
        Command::Eval {
            checkpoint: ckpt.clone(),
            split: lightst::cli::SplitArg::Test,
        },
    );
    assert!(ok.join("metrics.json").exists());

    let mut other = cfg.clone();
    other.teacher.dim = 5;
    let bad = create_run_dir(root.path(), "eval").unwrap();
    let err = execute(
        &other,
        &Command::Eval {
            checkpoint: ckpt,
            split: lightst::cli::SplitArg::Test,
        },
        &bad,
    )
    .unwrap_err()
    .to_string();
    assert!(
        err.contains("`base`") && err.contains("[4]") && err.contains("[5]"),
        "{err}"
    );
}

#[test]
fn unknown_config_key_is_reported_with_section() {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("bad.toml");
    std::fs::write(&path, "[teacher]\nlayerz = 2\n").unwrap();
    let out = root.path().join("runs");
    let cli = Cli::try_parse_from([
        "lightst",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "synth",
    ])
    .unwrap();
    let (dir, record) = run(&cli).unwrap_err();
    assert_eq!(record.kind, "config");
    assert!(record.message.contains("[teacher]") && record.message.contains("layerz"));
    let written = std::fs::read_to_string(dir.unwrap().join("error.json")).unwrap();
    assert!(written.contains("layerz"));
}

#[test]
fn seed_flag_overrides_every_seed() {
    let cli = Cli::try_parse_from(["lightst", "--seed", "42", "synth"]).unwrap();
    let cfg = lightst::cli::resolve_config(&cli.global).unwrap();
    assert_eq!(
        (cfg.synth.seed, cfg.teacher.seed, cfg.distill.seed),
        (42, 42, 42)
    );
}

#[test]
fn pipeline_writes_every_artifact_and_leaves_inputs_alone() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let dir = exec(&cfg, root.path(), Command::Pipeline);
    for f in [
        "config.toml",
        "traffic.csv",
        "adjacency.csv",
        "teacher.ckpt",
        "teacher_log.jsonl",
        "student.ckpt",
        "distill_log.jsonl",
        "metrics.json",
        "report.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let echoed = RunConfig::load(&dir.join("config.toml")).unwrap();
    assert_eq!(echoed, cfg);

    // Re-running from the echoed files reads them without modification.
    let mut from_files = cfg.clone();
    from_files.data.traffic = Some(dir.join("traffic.csv"));
    from_files.graph.adjacency = Some(dir.join("adjacency.csv"));
    let before = std::fs::read(dir.join("traffic.csv")).unwrap();
    let again = exec(
        &from_files,
        root.path(),
        Command::Eval {
            checkpoint: dir.join("student.ckpt"),
            split: lightst::cli::SplitArg::Test,
        },
    );
    assert_eq!(before, std::fs::read(dir.join("traffic.csv")).unwrap());
    let m1 = std::fs::read_to_string(dir.join("student_metrics.json")).unwrap();
    let m2 = std::fs::read_to_string(again.join("metrics.json")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn binary_exits_nonzero_with_an_error_record() {
    let root = tempfile::tempdir().unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_lightst"))
        .args([
            "--out",
            root.path().to_str().unwrap(),
            "eval",
            "--checkpoint",
        ])
        .arg(root.path().join("missing.ckpt"))
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let first = stderr.lines().next().unwrap();
    let record: serde_json::Value = serde_json::from_str(first).unwrap();
    assert_eq!(record["kind"], "io");
    assert_eq!(record["command"], "eval");
}

#[test]
fn binary_gradcheck_passes() {
    let root = tempfile::tempdir().unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_lightst"))
        .args(["--out", root.path().to_str().unwrap(), "gradcheck"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 20);
    assert!(!stdout.contains("FAIL"));
}
