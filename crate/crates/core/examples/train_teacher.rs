//! Train the graph teacher on synthetic data and compare it with the
//! historical-average baseline.

use lightst::data::{make_windows, synth_generate, Split, SynthConfig, WindowConfig};
use lightst::distill::{train_teacher, TrainConfig};
use lightst::eval::{evaluate, HistoricalAverage};
use lightst::teacher::{Teacher, TeacherConfig};

fn main() -> lightst::Result<()> {
    let (traffic, graph) = synth_generate(&SynthConfig::default())?;
    let data = make_windows(&traffic, &WindowConfig::default())?;
    let cfg = TeacherConfig {
        dim: 16,
        ..TeacherConfig::default()
    };
    let schedule = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let (params, log) = train_teacher(&data, &graph, &cfg, &schedule)?;
    for r in &log.records {
        println!(
            "epoch {:>3}  loss {:.4}  val MAE {:.4}",
            r.epoch,
            r.prediction_loss,
            r.val_mae.unwrap_or(f64::NAN)
        );
    }
    let teacher = Teacher::new(cfg, params, &graph)?;
    let m = evaluate(&teacher, &data, Split::Test, 1.0)?;
    let ha = HistoricalAverage::fit(&data, Some(288))?.evaluate(&data, Split::Test, 1.0)?;
    println!("teacher            MAE {:.3}  RMSE {:.3}", m.mae, m.rmse);
    println!("historical average MAE {:.3}  RMSE {:.3}", ha.mae, ha.rmse);
    Ok(())
}
