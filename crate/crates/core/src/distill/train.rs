//! Training loops: the teacher on its own, then the student against the
//! frozen teacher.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{align_slots, joint_loss_var, Reduction};
use crate::autodiff::{KlForm, Tape, Var};
use crate::checkpoint::quantize;
use crate::data::{Split, WindowBatch, WindowedData};
use crate::error::{Error, Result};
use crate::eval::mean_absolute_error;
use crate::graph::SpatialGraph;
use crate::model::{Mode, ParamSet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::student::{student_forward, Student, StudentConfig, StudentParams, StudentVars};
use crate::teacher::{
    prediction_loss, teacher_forward, Teacher, TeacherConfig, TeacherParams, TeacherVars,
};
use crate::tensor::Tensor;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// An independent random stream derived from a run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Optimization schedule shared by both training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Maximum epochs `S`.
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            patience: 15,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Contract(
                "lr must be > 0; epochs and batch size >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Temperature of the GCN-stage contrastive term.
    pub tau_spatial: f64,
    /// Temperature of the TCN-stage contrastive term.
    pub tau_temporal: f64,
    pub lambda_kl: f64,
    pub lambda_contrastive: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub kl_form: KlForm,
    pub reduction: Reduction,
    /// Encoder slots aligned with the teacher, counted from the end.
    /// Defaults to `min(T, H)`.
    pub align_slots: Option<usize>,
    /// Experimental: also update the teacher, adding its own loss.
    pub finetune_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_spatial: 0.5,
            tau_temporal: 0.5,
            lambda_kl: 1.0,
            lambda_contrastive: 1.0,
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            patience: 15,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            kl_form: KlForm::Proper,
            reduction: Reduction::Sum,
            align_slots: None,
            finetune_teacher: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_spatial > 0.0 && self.tau_temporal > 0.0) {
            return Err(Error::Contract("temperatures must be > 0".into()));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_contrastive >= 0.0) {
            return Err(Error::Contract("loss weights must be >= 0".into()));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.seed,
            optimizer: self.optimizer,
        }
    }

    /// The no-distillation ablation with the same schedule.
    pub fn without_distillation(&self) -> Self {
        Self {
            lambda_kl: 0.0,
            lambda_contrastive: 0.0,
            ..self.clone()
        }
    }
}

/// Mean batch losses of one epoch. Teacher training fills only
/// `prediction_loss` and `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub prediction_loss: f64,
    pub kl: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub total: f64,
    pub val_mae: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    /// One JSON object per epoch. Without wall-clock fields the output is a
    /// pure function of config and seed.
    pub fn to_jsonl(&self, wall_clock: bool) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let mut v = serde_json::to_value(r)?;
            if !wall_clock {
                v.as_object_mut().unwrap().remove("wall_clock_secs");
            }
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl(true)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        s.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Per-batch loss values: prediction, KL, spatial, temporal, total.
type BatchLosses = [f64; 5];

/// Shared epoch loop with shuffling, validation, early stopping and
/// best-state tracking.
fn run_epochs<S: Clone>(
    state: &mut S,
    schedule: &TrainConfig,
    data: &WindowedData,
    what: &str,
    mut step: impl FnMut(&mut S, &WindowBatch) -> Result<BatchLosses>,
    mut validate: impl FnMut(&S) -> Result<Option<f64>>,
) -> Result<(S, TrainLog)> {
    schedule.validate()?;
    let mut shuffle = rng_stream(schedule.seed, STREAM_SHUFFLE);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, S)> = None;
    let mut since_best = 0;
    for epoch in 1..=schedule.epochs {
        let started = Instant::now();
        let batches = data.batches(Split::Train, schedule.batch_size, Some(&mut shuffle))?;
        let mut sums = [0.0; 5];
        for b in &batches {
            let l = step(state, b)?;
            if !l[4].is_finite() {
                return Err(Error::Divergence(format!(
                    "{what}: loss became {} in epoch {epoch} (prediction {}, kl {}, spatial {}, temporal {})",
                    l[4], l[0], l[1], l[2], l[3]
                )));
            }
            for (s, v) in sums.iter_mut().zip(l) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let val_mae = validate(state)?;
        let mean = sums.map(|s| s / nb);
        let rec = EpochRecord {
            epoch,
            prediction_loss: mean[0],
            kl: mean[1],
            spatial: mean[2],
            temporal: mean[3],
            total: mean[4],
            val_mae,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "{what} epoch {epoch}: loss {:.5} (pred {:.5}) val MAE {}",
            rec.total,
            rec.prediction_loss,
            val_mae.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        log.records.push(rec);
        let criterion = val_mae.unwrap_or(mean[4]);
        if best.as_ref().is_none_or(|(b, _)| criterion < *b) {
            best = Some((criterion, state.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if schedule.patience > 0 && since_best >= schedule.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    let (_, best) = best.expect("at least one epoch runs");
    Ok((best, log))
}

fn check_finite<P: ParamSet>(p: &P, what: &str) -> Result<()> {
    if p.all_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what}: non-finite parameters after an update"
        )))
    }
}

fn collect_grads(tape: &Tape, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
    let mut g = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| g.take(v).expect("trainable leaf"))
        .collect())
}

fn apply(opt: &mut Optimizer, params: &mut impl ParamSet, grads: &[Tensor]) -> Result<()> {
    let refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut params.tensors_mut(), &refs)
}

/// Validation MAE, or `None` without validation windows.
fn val_mae<F: crate::model::Forecaster>(model: &F, data: &WindowedData) -> Result<Option<f64>> {
    if data.starts(Split::Val).is_empty() {
        return Ok(None);
    }
    mean_absolute_error(model, data, Split::Val).map(Some)
}

/// Trains the teacher on its prediction loss. Returns the parameters of the
/// best validation epoch, rounded to checkpoint precision.
pub fn train_teacher(
    data: &WindowedData,
    graph: &SpatialGraph,
    cfg: &TeacherConfig,
    schedule: &TrainConfig,
) -> Result<(TeacherParams, TrainLog)> {
    let mut init_rng = rng_stream(schedule.seed, STREAM_INIT);
    let params = TeacherParams::init(cfg, &mut init_rng)?;
    train_teacher_from(params, data, graph, cfg, schedule)
}

/// Continues training from existing parameters.
pub fn train_teacher_from(
    mut params: TeacherParams,
    data: &WindowedData,
    graph: &SpatialGraph,
    cfg: &TeacherConfig,
    schedule: &TrainConfig,
) -> Result<(TeacherParams, TrainLog)> {
    cfg.validate()?;
    let mut opt = Optimizer::new(schedule.optimizer, schedule.lr, params.tensors());
    let mut dropout = rng_stream(schedule.seed, STREAM_DROPOUT);
    let (mut best, log) = run_epochs(
        &mut params,
        schedule,
        data,
        "teacher",
        |p, batch| {
            let mut tape = Tape::new();
            let vars = TeacherVars::bind(p, &mut tape, true);
            let tr = teacher_forward(
                &mut tape,
                &vars,
                cfg,
                batch,
                graph,
                Mode::Train,
                &mut dropout,
            )?;
            let y = tape.constant(batch.normalized_targets());
            let loss = prediction_loss(&mut tape, tr.pred, y)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Ok([v; 5]);
            }
            let grads = collect_grads(&tape, loss, &vars.all)?;
            apply(&mut opt, p, &grads)?;
            check_finite(p, "teacher")?;
            Ok([v, 0.0, 0.0, 0.0, v])
        },
        |p| val_mae(&Teacher::new(cfg.clone(), p.clone(), graph)?, data),
    )?;
    quantize(&mut best);
    Ok((best, log))
}

/// Trains a student on its prediction loss alone.
pub fn train_student(
    data: &WindowedData,
    cfg: &StudentConfig,
    schedule: &TrainConfig,
) -> Result<(StudentParams, TrainLog)> {
    cfg.validate()?;
    let mut init_rng = rng_stream(schedule.seed, STREAM_INIT);
    let mut params = StudentParams::init(cfg, &mut init_rng)?;
    let mut opt = Optimizer::new(schedule.optimizer, schedule.lr, params.tensors());
    let (mut best, log) = run_epochs(
        &mut params,
        schedule,
        data,
        "student",
        |p, batch| {
            let mut tape = Tape::new();
            let vars = StudentVars::bind(p, &mut tape, true);
            let st = student_forward(&mut tape, &vars, cfg, batch)?;
            let y = tape.constant(batch.normalized_targets());
            let loss = prediction_loss(&mut tape, st.pred, y)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Ok([v; 5]);
            }
            let grads = collect_grads(&tape, loss, &vars.all)?;
            apply(&mut opt, p, &grads)?;
            check_finite(p, "student")?;
            Ok([v, 0.0, 0.0, 0.0, v])
        },
        |p| val_mae(&Student::new(cfg.clone(), p.clone())?, data),
    )?;
    quantize(&mut best);
    Ok((best, log))
}

/// Result of a distillation run.
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: StudentParams,
    /// Updated teacher, only with `finetune_teacher`.
    pub teacher: Option<TeacherParams>,
    pub log: TrainLog,
}

/// Teacher embeddings used as alignment targets.
struct Targets {
    spatial: Var,
    temporal: Var,
    /// Teacher loss and trainable leaves when fine-tuning.
    joint: Option<(Var, Vec<Var>)>,
}

/// Records the full distillation objective for one batch on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn distill_objective(
    tape: &mut Tape,
    student: &StudentVars,
    student_cfg: &StudentConfig,
    teacher_spatial: Var,
    teacher_temporal: Var,
    batch: &WindowBatch,
    cfg: &DistillConfig,
) -> Result<super::losses::LossTerms> {
    let (b, n, t) = (batch.len(), batch.num_nodes(), batch.history_len());
    let d = student_cfg.dim;
    let st = student_forward(tape, student, student_cfg, batch)?;
    if tape.value(st.embedding).shape() != tape.value(teacher_temporal).shape()
        || tape.value(teacher_spatial).shape() != tape.value(teacher_temporal).shape()
    {
        return Err(Error::shape(format!(
            "student embedding {:?} does not match teacher embedding {:?}",
            tape.value(st.embedding).shape(),
            tape.value(teacher_temporal).shape()
        )));
    }
    let y = tape.constant(batch.normalized_targets());
    let prediction = prediction_loss(tape, st.pred, y)?;
    let slots = cfg.align_slots.unwrap_or(t.min(batch.horizon()));
    let dims = (b, t, n, d);
    let s = align_slots(tape, st.embedding, dims, slots)?;
    let sp = align_slots(tape, teacher_spatial, dims, slots)?;
    let te = align_slots(tape, teacher_temporal, dims, slots)?;
    let scale = match cfg.reduction {
        Reduction::Sum => 1.0 / b as f64,
        Reduction::Mean => 1.0 / (b * slots * n) as f64,
    };
    let kl = tape.kl_rows(te, s, cfg.kl_form)?;
    let kl = tape.scale(kl, scale);
    let spatial = tape.contrastive(s, sp, n, cfg.tau_spatial)?;
    let spatial = tape.scale(spatial, scale);
    let temporal = tape.contrastive(s, te, n, cfg.tau_temporal)?;
    let temporal = tape.scale(temporal, scale);
    let total = joint_loss_var(
        tape,
        [prediction, kl, spatial, temporal],
        cfg.lambda_kl,
        cfg.lambda_contrastive,
    )?;
    Ok(super::losses::LossTerms {
        prediction,
        kl,
        spatial,
        temporal,
        total,
    })
}

/// Trains a fresh student against a teacher on the joint objective.
///
/// The teacher runs in eval mode and receives no updates unless
/// `finetune_teacher` is set.
pub fn distill_train(
    teacher: &Teacher<'_>,
    data: &WindowedData,
    student_cfg: &StudentConfig,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    student_cfg.validate()?;
    let tc = &teacher.config;
    if tc.dim != student_cfg.dim
        || tc.history != student_cfg.history
        || tc.horizon != student_cfg.horizon
    {
        return Err(Error::shape(format!(
            "teacher (d={}, T={}, H={}) and student (d={}, T={}, H={}) embeddings are not aligned",
            tc.dim,
            tc.history,
            tc.horizon,
            student_cfg.dim,
            student_cfg.history,
            student_cfg.horizon
        )));
    }
    let schedule = cfg.schedule();
    let mut init_rng = rng_stream(schedule.seed, STREAM_INIT);
    let student = StudentParams::init(student_cfg, &mut init_rng)?;
    let mut s_opt = Optimizer::new(schedule.optimizer, schedule.lr, student.tensors());
    let mut t_opt = cfg
        .finetune_teacher
        .then(|| Optimizer::new(schedule.optimizer, schedule.lr, teacher.params.tensors()));
    let mut dropout = rng_stream(schedule.seed, STREAM_DROPOUT);
    let graph = teacher.graph;
    let mut state = (student, teacher.params.clone());

    let (best, log) = run_epochs(
        &mut state,
        &schedule,
        data,
        "distill",
        |(sp, tp), batch| {
            let mut tape = Tape::new();
            let targets = if cfg.finetune_teacher {
                let tv = TeacherVars::bind(tp, &mut tape, true);
                let tr =
                    teacher_forward(&mut tape, &tv, tc, batch, graph, Mode::Train, &mut dropout)?;
                let y = tape.constant(batch.normalized_targets());
                let tl = prediction_loss(&mut tape, tr.pred, y)?;
                Targets {
                    spatial: tr.spatial,
                    temporal: tr.temporal,
                    joint: Some((tl, tv.all)),
                }
            } else {
                let frozen = Teacher::new(tc.clone(), tp.clone(), graph)?;
                let a = frozen.activations(batch, Mode::Eval, &mut dropout)?;
                Targets {
                    spatial: tape.constant(a.spatial),
                    temporal: tape.constant(a.temporal),
                    joint: None,
                }
            };
            let sv = StudentVars::bind(sp, &mut tape, true);
            let terms = distill_objective(
                &mut tape,
                &sv,
                student_cfg,
                targets.spatial,
                targets.temporal,
                batch,
                cfg,
            )?;
            let mut total = terms.total;
            if let Some((tl, _)) = &targets.joint {
                total = tape.add(total, *tl)?;
            }
            let v = |x: Var| tape.value(x).item();
            let losses = [
                v(terms.prediction),
                v(terms.kl),
                v(terms.spatial),
                v(terms.temporal),
                v(total),
            ];
            if !losses[4].is_finite() {
                return Ok(losses);
            }
            let mut g = tape.backward(total)?;
            let sg: Vec<Tensor> = sv
                .all
                .iter()
                .map(|&x| g.take(x).expect("student leaf"))
                .collect();
            apply(&mut s_opt, sp, &sg)?;
            check_finite(sp, "student")?;
            if let (Some((_, tvars)), Some(opt)) = (&targets.joint, t_opt.as_mut()) {
                let tg: Vec<Tensor> = tvars
                    .iter()
                    .map(|&x| g.take(x).expect("teacher leaf"))
                    .collect();
                apply(opt, tp, &tg)?;
                check_finite(tp, "teacher")?;
            }
            Ok(losses)
        },
        |(sp, _)| val_mae(&Student::new(student_cfg.clone(), sp.clone())?, data),
    )?;
    let (mut student, mut tuned) = best;
    quantize(&mut student);
    let teacher_out = cfg.finetune_teacher.then(|| {
        quantize(&mut tuned);
        tuned
    });
    Ok(DistillOutcome {
        student,
        teacher: teacher_out,
        log,
    })
}
