//! Distilled student vs. the same student trained without distillation
//! (both loss weights zero), over a sweep of seeds on synthetic data.
//!
//! ```text
//! cargo run --release --example distill_ablation -- --seeds 5 --epochs 20 --dim 16
//! ```

use clap::Parser;
use lightst::data::{make_windows, synth_generate, Split, SynthConfig, WindowConfig};
use lightst::distill::{distill_train, train_teacher, DistillConfig, Reduction, TrainConfig};
use lightst::eval::mean_absolute_error;
use lightst::student::{Student, StudentConfig};
use lightst::teacher::{Teacher, TeacherConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// First seed of the sweep.
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    teacher_epochs: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_kl: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_contrastive: f64,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    mean: bool,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

fn main() -> lightst::Result<()> {
    let a = Args::parse();
    let mut wins = 0;
    let mut gains = Vec::new();
    for seed in a.first_seed..a.first_seed + a.seeds {
        let started = std::time::Instant::now();
        let (traffic, graph) = synth_generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })?;
        let data = make_windows(&traffic, &WindowConfig::default())?;
        let tcfg = TeacherConfig {
            dim: a.dim,
            ..TeacherConfig::default()
        };
        let schedule = TrainConfig {
            epochs: a.teacher_epochs,
            seed,
            lr: a.lr,
            ..TrainConfig::default()
        };
        let (tp, _) = train_teacher(&data, &graph, &tcfg, &schedule)?;
        let teacher = Teacher::new(tcfg, tp, &graph)?;
        let t_mae = mean_absolute_error(&teacher, &data, Split::Test)?;

        let scfg = StudentConfig {
            dim: a.dim,
            ..StudentConfig::default()
        };
        let dcfg = DistillConfig {
            epochs: a.epochs,
            seed,
            lr: a.lr,
            lambda_kl: a.lambda_kl,
            lambda_contrastive: a.lambda_contrastive,
            tau_spatial: a.tau,
            tau_temporal: a.tau,
            reduction: if a.mean {
                Reduction::Mean
            } else {
                Reduction::Sum
            },
            ..DistillConfig::default()
        };
        let mae = |cfg: &DistillConfig| -> lightst::Result<f64> {
            let out = distill_train(&teacher, &data, &scfg, cfg)?;
            mean_absolute_error(
                &Student::new(scfg.clone(), out.student)?,
                &data,
                Split::Test,
            )
        };
        let kd = mae(&dcfg)?;
        let base = mae(&dcfg.without_distillation())?;
        let gain = (base - kd) / base;
        wins += usize::from(kd <= base);
        gains.push(gain);
        println!(
            "seed {seed}: teacher {t_mae:.4}  distilled {kd:.4}  baseline {base:.4}  gain {:+.2}%  ({:.0}s)",
            100.0 * gain,
            started.elapsed().as_secs_f64()
        );
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    println!("wins {wins}/{}  mean gain {:+.2}%", a.seeds, 100.0 * mean);
    Ok(())
}
