//! Command-line entry points. Each command resolves a [`RunConfig`], creates a
//! fresh run directory, and writes its artifacts there.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{
    load_traffic_csv, make_windows, synth_generate, write_traffic_csv, Split, TrafficTensor,
    WindowedData,
};
use crate::distill::{distill_train, train_teacher, TrainLog};
use crate::error::{Error, Result};
use crate::eval::{
    bench_inference, evaluate, oversmoothing_score, DistillReport, HistoricalAverage,
    LatencyReport, MetricsReport,
};
use crate::graph::{load_adjacency_csv, GraphOptions, SpatialGraph};
use crate::model::{Mode, ParamSet};
use crate::student::{Student, StudentParams};
use crate::teacher::{Teacher, TeacherParams};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "LIGHTST_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "lightst",
    version,
    about = "Teacher/student traffic forecasting"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (default: `$LIGHTST_OUT`, the config's `output_dir`, or `runs`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic traffic CSV and adjacency CSV.
    Synth,
    /// Train the graph teacher.
    TrainTeacher,
    /// Distill a trained teacher into the student.
    Distill {
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Score a teacher or student checkpoint.
    Eval {
        /// Teacher or student checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Time teacher and student inference on the test split.
    Bench {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// Finite-difference checks of every operation and both models.
    Gradcheck {
        /// Number of seeds, starting at the distill seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// synth, train-teacher, distill, eval and bench in one run directory.
    Pipeline,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainTeacher => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Machine-readable failure record, written as `error.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub command: String,
    pub kind: String,
    pub message: String,
}

/// Loads the config file (or defaults) and applies the seed override.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output root: `--out`, then `$LIGHTST_OUT`, then the config, then `runs`.
pub fn output_root(global: &GlobalArgs, cfg: Option<&RunConfig>) -> PathBuf {
    global
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Creates `<root>/<command>-<unix millis>`, adding a numeric suffix if the
/// name is taken. Existing directories are never reused.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis());
    let base = format!("{command}-{millis}");
    for k in 0.. {
        let name = if k == 0 {
            base.clone()
        } else {
            format!("{base}-{k}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Traffic and graph named by the config, or generated from `[synth]`.
pub fn load_inputs(cfg: &RunConfig) -> Result<(TrafficTensor, SpatialGraph)> {
    let opts = GraphOptions {
        self_loops: cfg.graph.self_loops,
    };
    let (traffic, graph) = match &cfg.data.traffic {
        Some(path) => {
            let traffic = load_traffic_csv(path, cfg.data.interval_minutes)?;
            let adj = cfg.graph.adjacency.as_ref().ok_or_else(|| Error::Config {
                section: "graph".into(),
                key: "adjacency".into(),
                msg: "required when [data] traffic is set".into(),
            })?;
            let graph = load_adjacency_csv(adj, traffic.num_nodes(), opts)?;
            (traffic, graph)
        }
        None => synth_generate(&cfg.synth)?,
    };
    let graph = graph.with_propagation(cfg.graph.propagation)?;
    Ok((traffic, graph))
}

/// Inputs plus their windowed view.
pub struct Inputs {
    pub traffic: TrafficTensor,
    pub graph: SpatialGraph,
    pub data: WindowedData,
}

pub fn prepare(cfg: &RunConfig) -> Result<Inputs> {
    let (traffic, graph) = load_inputs(cfg)?;
    let data = make_windows(&traffic, &cfg.window())?;
    Ok(Inputs {
        traffic,
        graph,
        data,
    })
}

/// Files written by one command, relative to its run directory.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub files: Vec<String>,
    /// Text printed to stdout.
    pub summary: String,
}

struct Run<'a> {
    dir: &'a Path,
    files: Vec<String>,
    summary: String,
}

impl<'a> Run<'a> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let p = self.path(name);
        write_json(&p, v)
    }

    fn log(&mut self, name: &str, log: &TrainLog) -> Result<()> {
        let p = self.path(name);
        log.write_jsonl(&p)
    }

    fn say(&mut self, line: impl AsRef<str>) {
        self.summary.push_str(line.as_ref());
        self.summary.push('\n');
    }
}

/// Runs one command inside an already-created run directory.
pub fn execute(cfg: &RunConfig, command: &Command, dir: &Path) -> Result<Outcome> {
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let mut run = Run {
        dir,
        files: vec!["config.toml".into()],
        summary: String::new(),
    };
    match command {
        Command::Synth => cmd_synth(cfg, &mut run)?,
        Command::TrainTeacher => {
            let inputs = prepare(cfg)?;
            cmd_train_teacher(cfg, &inputs, &mut run)?;
        }
        Command::Distill { teacher } => {
            let inputs = prepare(cfg)?;
            let ck = load_checkpoint(teacher)?;
            cmd_distill(cfg, &inputs, &ck, &mut run)?;
        }
        Command::Eval { checkpoint, split } => {
            let inputs = prepare(cfg)?;
            let ck = load_checkpoint(checkpoint)?;
            cmd_eval(cfg, &inputs, &ck, (*split).into(), &mut run)?;
        }
        Command::Bench { teacher, student } => {
            let inputs = prepare(cfg)?;
            let t = load_checkpoint(teacher)?;
            let s = load_checkpoint(student)?;
            cmd_bench(cfg, &inputs, &t, &s, &mut run)?;
        }
        Command::Gradcheck { seeds } => cmd_gradcheck(cfg, *seeds, &mut run)?,
        Command::Pipeline => cmd_pipeline(cfg, &mut run)?,
    }
    Ok(Outcome {
        run_dir: dir.to_path_buf(),
        files: run.files,
        summary: run.summary,
    })
}

fn cmd_synth(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let (traffic, graph) = synth_generate(&cfg.synth)?;
    let tp = run.path("traffic.csv");
    write_traffic_csv(&traffic, &tp)?;
    let gp = run.path("adjacency.csv");
    graph.write_csv(&gp)?;
    run.say(format!(
        "synthetic data: {} nodes, {} steps, {} edges",
        traffic.num_nodes(),
        traffic.num_steps(),
        graph.num_edges()
    ));
    Ok(())
}

fn teacher_from<'g>(
    cfg: &RunConfig,
    ck: &Checkpoint,
    graph: &'g SpatialGraph,
) -> Result<Teacher<'g>> {
    let (tc, tp) = ck.teacher(Some(&cfg.teacher_model()))?;
    Teacher::new(tc, tp, graph)
}

fn student_from(cfg: &RunConfig, ck: &Checkpoint) -> Result<Student> {
    let (sc, sp) = ck.student(Some(&cfg.student_model()))?;
    Student::new(sc, sp)
}

fn cmd_train_teacher(cfg: &RunConfig, inputs: &Inputs, run: &mut Run) -> Result<MetricsReport> {
    let model = cfg.teacher_model();
    let (params, log) =
        train_teacher(&inputs.data, &inputs.graph, &model, &cfg.teacher_schedule())?;
    let p = run.path("teacher.ckpt");
    save_checkpoint(&p, &params, &model)?;
    run.log("teacher_log.jsonl", &log)?;
    let teacher = Teacher::new(model, params, &inputs.graph)?;
    let metrics = evaluate(&teacher, &inputs.data, Split::Test, cfg.data.mape_floor)?;
    run.json("teacher_metrics.json", &metrics)?;
    run.say(format!(
        "teacher: {} epochs (best {}), test MAE {:.4}",
        log.records.len(),
        log.best_epoch,
        metrics.mae
    ));
    Ok(metrics)
}

fn cmd_distill(
    cfg: &RunConfig,
    inputs: &Inputs,
    teacher_ck: &Checkpoint,
    run: &mut Run,
) -> Result<MetricsReport> {
    let teacher = teacher_from(cfg, teacher_ck, &inputs.graph)?;
    let student_cfg = cfg.student_model();
    let out = distill_train(&teacher, &inputs.data, &student_cfg, &cfg.distill)?;
    let p = run.path("student.ckpt");
    save_checkpoint(&p, &out.student, &student_cfg)?;
    if let Some(tp) = &out.teacher {
        let p = run.path("teacher_finetuned.ckpt");
        save_checkpoint(&p, tp, &teacher.config)?;
    }
    run.log("distill_log.jsonl", &out.log)?;
    let student = Student::new(student_cfg, out.student)?;
    let metrics = evaluate(&student, &inputs.data, Split::Test, cfg.data.mape_floor)?;
    run.json("student_metrics.json", &metrics)?;
    run.say(format!(
        "student: {} epochs (best {}), test MAE {:.4}",
        out.log.records.len(),
        out.log.best_epoch,
        metrics.mae
    ));
    Ok(metrics)
}

fn cmd_eval(
    cfg: &RunConfig,
    inputs: &Inputs,
    ck: &Checkpoint,
    split: Split,
    run: &mut Run,
) -> Result<MetricsReport> {
    let floor = cfg.data.mape_floor;
    let arch = ck.header.architecture.as_str();
    let metrics = if arch == TeacherParams::ARCHITECTURE {
        evaluate(
            &teacher_from(cfg, ck, &inputs.graph)?,
            &inputs.data,
            split,
            floor,
        )?
    } else if arch == StudentParams::ARCHITECTURE {
        evaluate(&student_from(cfg, ck)?, &inputs.data, split, floor)?
    } else {
        return Err(Error::Checkpoint(format!("unknown architecture `{arch}`")));
    };
    run.json("metrics.json", &metrics)?;
    run.say(format!(
        "{} {split:?}: MAE {:.4}  RMSE {:.4}  MAPE {}",
        ck.header.architecture,
        metrics.mae,
        metrics.rmse,
        metrics.mape.map_or("-".into(), |m| format!("{m:.2}%"))
    ));
    Ok(metrics)
}

fn bench_pair(
    cfg: &RunConfig,
    inputs: &Inputs,
    teacher: &Teacher,
    student: &Student,
) -> Result<(LatencyReport, LatencyReport)> {
    let batches = inputs
        .data
        .batches::<ChaCha8Rng>(Split::Test, cfg.bench.batch_size, None)?;
    let b = &cfg.bench;
    let tl = bench_inference(teacher, &batches, b.warmup, b.repeats)?;
    let mut sl = bench_inference(student, &batches, b.warmup, b.repeats)?;
    sl.compare_to(&tl);
    Ok((tl, sl))
}

fn cmd_bench(
    cfg: &RunConfig,
    inputs: &Inputs,
    teacher_ck: &Checkpoint,
    student_ck: &Checkpoint,
    run: &mut Run,
) -> Result<DistillReport> {
    let teacher = teacher_from(cfg, teacher_ck, &inputs.graph)?;
    let student = student_from(cfg, student_ck)?;
    let floor = cfg.data.mape_floor;
    let (tl, sl) = bench_pair(cfg, inputs, &teacher, &student)?;
    let report = DistillReport {
        teacher_metrics: Some(evaluate(&teacher, &inputs.data, Split::Test, floor)?),
        student_metrics: Some(evaluate(&student, &inputs.data, Split::Test, floor)?),
        teacher_latency: Some(tl),
        student_latency: Some(sl),
        ..DistillReport::default()
    };
    run.json(
        "latency.json",
        &[&report.teacher_latency, &report.student_latency],
    )?;
    run.json("report.json", &report)?;
    run.say(report.summary_table());
    Ok(report)
}

#[derive(Debug, Serialize)]
struct GradcheckRow {
    name: String,
    seed: u64,
    max_rel_error: f64,
    passed: bool,
}

fn cmd_gradcheck(cfg: &RunConfig, seeds: u64, run: &mut Run) -> Result<()> {
    let base = cfg.distill.seed;
    let mut rows = Vec::new();
    for s in base..base + seeds.max(1) {
        for g in crate::gradcheck::op_suite(s)?
            .into_iter()
            .chain(crate::gradcheck::model_suite(s)?)
        {
            rows.push(GradcheckRow {
                name: g.name,
                seed: g.seed,
                max_rel_error: g.max_rel_error,
                passed: g.passed,
            });
        }
    }
    run.json("gradcheck.json", &rows)?;
    for r in &rows {
        run.say(format!(
            "{} {:<24} seed {:<4} max rel err {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seed,
            r.max_rel_error
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::Contract(format!(
            "{failed} of {} gradient checks failed",
            rows.len()
        )));
    }
    Ok(())
}

/// `(slot, n, j, weight)`.
type WeightEntry = (usize, usize, usize, f64);

/// Teacher layer embeddings and alignment weights on the first test batch.
fn diagnostics(
    inputs: &Inputs,
    teacher: &Teacher,
    student: &Student,
) -> Result<(Vec<f64>, Vec<WeightEntry>)> {
    let batch = inputs
        .data
        .batches::<ChaCha8Rng>(Split::Test, 1, None)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data("the Test split has no windows".into()))?;
    let n = batch.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acts = teacher.activations(&batch, Mode::Eval, &mut rng)?;
    let smoothing = if n >= 2 {
        oversmoothing_score(&acts.layers, n)?
    } else {
        Vec::new()
    };
    let emb = student.activations(&batch)?.embedding;
    let slot = batch.history_len() - 1;
    let mut weights = Vec::new();
    for j in 0..n.min(4) {
        let w = crate::distill::kl_gradient_weight(&emb, n, slot, 0, j)?;
        weights.push((slot, 0, j, w));
    }
    Ok((smoothing, weights))
}

fn cmd_pipeline(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    if cfg.data.traffic.is_none() {
        cmd_synth(cfg, run)?;
    }
    let inputs = prepare(cfg)?;
    cmd_train_teacher(cfg, &inputs, run)?;
    let teacher_ck = load_checkpoint(&run.dir.join("teacher.ckpt"))?;
    cmd_distill(cfg, &inputs, &teacher_ck, run)?;
    let student_ck = load_checkpoint(&run.dir.join("student.ckpt"))?;

    let teacher = teacher_from(cfg, &teacher_ck, &inputs.graph)?;
    let student = student_from(cfg, &student_ck)?;
    let floor = cfg.data.mape_floor;
    let day = (24 * 60 / cfg.data.interval_minutes.max(1)) as usize;
    let ha = match HistoricalAverage::fit(&inputs.data, Some(day)) {
        Ok(ha) => ha,
        Err(e) => {
            log::warn!("{e}; historical average falls back to the training mean");
            HistoricalAverage::fit(&inputs.data, None)?
        }
    };
    let (tl, sl) = bench_pair(cfg, &inputs, &teacher, &student)?;
    let (oversmoothing, kl_weights) = diagnostics(&inputs, &teacher, &student)?;
    let report = DistillReport {
        teacher_metrics: Some(evaluate(&teacher, &inputs.data, Split::Test, floor)?),
        student_metrics: Some(evaluate(&student, &inputs.data, Split::Test, floor)?),
        baseline_metrics: Some(ha.evaluate(&inputs.data, Split::Test, floor)?),
        teacher_latency: Some(tl),
        student_latency: Some(sl),
        oversmoothing,
        kl_weights,
    };
    run.json("metrics.json", &MetricsBundle::from(&report))?;
    run.json("report.json", &report)?;
    run.say(report.summary_table());
    Ok(())
}

/// The timing-free part of a pipeline report.
#[derive(Debug, Serialize)]
struct MetricsBundle<'a> {
    teacher: &'a Option<MetricsReport>,
    student: &'a Option<MetricsReport>,
    historical_average: &'a Option<MetricsReport>,
    oversmoothing: &'a [f64],
    kl_weights: &'a [(usize, usize, usize, f64)],
}

impl<'a> From<&'a DistillReport> for MetricsBundle<'a> {
    fn from(r: &'a DistillReport) -> Self {
        Self {
            teacher: &r.teacher_metrics,
            student: &r.student_metrics,
            historical_average: &r.baseline_metrics,
            oversmoothing: &r.oversmoothing,
            kl_weights: &r.kl_weights,
        }
    }
}

/// Full command execution: config, run directory, artifacts, and an
/// `error.json` record on failure. Returns the error record alongside the
/// run directory when one could be created.
pub fn run(cli: &Cli) -> std::result::Result<Outcome, (Option<PathBuf>, ErrorRecord)> {
    let name = cli.command.name();
    let record = |e: &Error| ErrorRecord {
        command: name.to_string(),
        kind: e.kind().to_string(),
        message: e.to_string(),
    };
    let cfg = resolve_config(&cli.global);
    let root = output_root(&cli.global, cfg.as_ref().ok());
    let dir = match create_run_dir(&root, name) {
        Ok(d) => d,
        Err(e) => return Err((None, record(&e))),
    };
    let result = cfg.and_then(|cfg| execute(&cfg, &cli.command, &dir));
    match result {
        Ok(o) => Ok(o),
        Err(e) => {
            let rec = record(&e);
            let _ = write_json(&dir.join("error.json"), &rec);
            Err((Some(dir), rec))
        }
    }
}
