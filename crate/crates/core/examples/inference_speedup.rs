//! Inference latency of the teacher and the student on the same windows.
//!
//! ```text
//! cargo run --release --example inference_speedup -- 800 64
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lightst::data::{make_windows, synth_generate, Split, SynthConfig, WindowConfig};
use lightst::eval::{bench_inference, DistillReport};
use lightst::student::{Student, StudentConfig, StudentParams};
use lightst::teacher::{Teacher, TeacherConfig, TeacherParams};

fn main() -> lightst::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let nodes = args.next().flatten().unwrap_or(200);
    let dim = args.next().flatten().unwrap_or(64);
    let (traffic, graph) = synth_generate(&SynthConfig {
        nodes,
        steps: 280,
        ..SynthConfig::default()
    })?;
    let data = make_windows(&traffic, &WindowConfig::default())?;
    let batches = data.batches::<ChaCha8Rng>(Split::Test, 8, None)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tcfg = TeacherConfig {
        dim,
        ..TeacherConfig::default()
    };
    let scfg = StudentConfig {
        dim,
        ..StudentConfig::default()
    };
    let teacher = Teacher::new(tcfg.clone(), TeacherParams::init(&tcfg, &mut rng)?, &graph)?;
    let student = Student::new(scfg.clone(), StudentParams::init(&scfg, &mut rng)?)?;

    let tl = bench_inference(&teacher, &batches, 1, 5)?;
    let mut sl = bench_inference(&student, &batches, 1, 5)?;
    sl.compare_to(&tl);
    let report = DistillReport {
        teacher_latency: Some(tl),
        student_latency: Some(sl),
        ..DistillReport::default()
    };
    println!("N={nodes}, d={dim}, {} edges", graph.num_edges());
    print!("{}", report.summary_table());
    Ok(())
}
