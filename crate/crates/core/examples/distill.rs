//! The two-phase procedure: train the teacher, freeze it, then train the
//! graph-less student against its embeddings. Saves both checkpoints.

use lightst::checkpoint::save_checkpoint;
use lightst::data::{make_windows, synth_generate, Split, SynthConfig, WindowConfig};
use lightst::distill::{distill_train, train_teacher, DistillConfig, TrainConfig};
use lightst::eval::{evaluate, DistillReport};
use lightst::student::{Student, StudentConfig};
use lightst::teacher::{Teacher, TeacherConfig};

fn main() -> lightst::Result<()> {
    let (traffic, graph) = synth_generate(&SynthConfig::default())?;
    let data = make_windows(&traffic, &WindowConfig::default())?;
    let tcfg = TeacherConfig {
        dim: 16,
        ..TeacherConfig::default()
    };
    let (tp, _) = train_teacher(
        &data,
        &graph,
        &tcfg,
        &TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
    )?;
    let teacher = Teacher::new(tcfg.clone(), tp, &graph)?;

    let scfg = StudentConfig {
        dim: 16,
        ..StudentConfig::default()
    };
    let out = distill_train(
        &teacher,
        &data,
        &scfg,
        &DistillConfig {
            epochs: 10,
            ..DistillConfig::default()
        },
    )?;
    for r in &out.log.records {
        println!(
            "epoch {:>3}  pred {:.3}  kl {:.3}  spatial {:.3}  temporal {:.3}  val MAE {:.3}",
            r.epoch,
            r.prediction_loss,
            r.kl,
            r.spatial,
            r.temporal,
            r.val_mae.unwrap_or(f64::NAN)
        );
    }
    save_checkpoint("teacher.ckpt".as_ref(), &teacher.params, &tcfg)?;
    save_checkpoint("student.ckpt".as_ref(), &out.student, &scfg)?;
    let student = Student::new(scfg, out.student)?;
    let report = DistillReport {
        teacher_metrics: Some(evaluate(&teacher, &data, Split::Test, 1.0)?),
        student_metrics: Some(evaluate(&student, &data, Split::Test, 1.0)?),
        ..DistillReport::default()
    };
    print!("{}", report.summary_table());
    Ok(())
}
