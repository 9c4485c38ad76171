//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvLayout, KlForm, Tape, Var};
use crate::data::{make_windows, SplitConfig, TrafficTensor, WindowBatch, WindowConfig};
use crate::distill::{distill_objective, DistillConfig};
use crate::error::Result;
use crate::graph::SpatialGraph;
use crate::model::{Mode, ParamSet};
use crate::student::{StudentConfig, StudentParams, StudentVars};
use crate::teacher::{
    prediction_loss, teacher_forward, Teacher, TeacherConfig, TeacherParams, TeacherVars,
};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    /// Relative error per input tensor.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both norms
/// vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of `f` at `inputs` with central differences,
/// returning one relative error per input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("leaf")).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut xs = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[k] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let numeric = Tensor::new(inputs[i].shape().to_vec(), numeric)?;
        errors.push(relative_error(&analytic[i], &numeric));
    }
    Ok(errors)
}

fn record(name: &str, seed: u64, rel_errors: Vec<f64>) -> GradCheck {
    let max = rel_errors.iter().copied().fold(0.0, f64::max);
    GradCheck {
        name: name.to_string(),
        seed,
        rel_errors,
        max_rel_error: max,
        passed: max < REL_TOLERANCE,
    }
}

/// Values bounded away from zero, so kinks stay out of reach of the step.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// Reduces a tensor output to a scalar via a fixed random projection.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = Tensor::randn(tape.value(out).shape().to_vec(), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn random_graph(n: usize, rng: &mut ChaCha8Rng) -> Result<SpatialGraph> {
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if b == a + 1 || rng.random::<f64>() < 0.4 {
                pairs.push((a, b));
            }
        }
    }
    SpatialGraph::from_pairs(n, &pairs)
}

/// Gradient checks of every differentiable tape operation for one seed.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape.to_vec(), 1.0, rng);

    let a = r(&[3, 4], &mut rng);
    let b = r(&[4, 2], &mut rng);
    out.push(record(
        "matmul",
        seed,
        check_gradients(&[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, seed)
        })?,
    ));

    let (x, y) = (r(&[3, 4], &mut rng), r(&[3, 4], &mut rng));
    type Bin = fn(&mut Tape, Var, Var) -> Result<Var>;
    let binary: [(&str, Bin); 3] = [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
    for (name, op) in binary {
        out.push(record(
            name,
            seed,
            check_gradients(&[x.clone(), y.clone()], |t, v| {
                let z = op(t, v[0], v[1])?;
                project(t, z, seed)
            })?,
        ));
    }

    let bias = r(&[3], &mut rng);
    let x5 = r(&[5, 3], &mut rng);
    out.push(record(
        "add_bias",
        seed,
        check_gradients(&[x5.clone(), bias], |t, v| {
            let z = t.add_bias(v[0], v[1])?;
            project(t, z, seed)
        })?,
    ));
    out.push(record(
        "scale",
        seed,
        check_gradients(&[x5], |t, v| {
            let z = t.scale(v[0], -1.7);
            project(t, z, seed)
        })?,
    ));

    let xk = off_zero(&[4, 5], &mut rng);
    out.push(record(
        "relu",
        seed,
        check_gradients(std::slice::from_ref(&xk), |t, v| {
            let z = t.relu(v[0]);
            project(t, z, seed)
        })?,
    ));
    out.push(record(
        "leaky_relu",
        seed,
        check_gradients(std::slice::from_ref(&xk), |t, v| {
            let z = t.leaky_relu(v[0], 0.1)?;
            project(t, z, seed)
        })?,
    ));
    out.push(record(
        "dropout",
        seed,
        check_gradients(&[xk], |t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            let z = t.dropout(v[0], 0.3, true, &mut mask_rng)?;
            project(t, z, seed)
        })?,
    ));

    let xs = r(&[2, 3, 4], &mut rng);
    for axis in 0..3 {
        out.push(record(
            &format!("softmax_axis{axis}"),
            seed,
            check_gradients(std::slice::from_ref(&xs), |t, v| {
                let z = t.softmax(v[0], axis)?;
                project(t, z, seed)
            })?,
        ));
    }

    let g = random_graph(5, &mut rng)?;
    let xp = r(&[10, 3], &mut rng);
    out.push(record(
        "propagate",
        seed,
        check_gradients(&[xp], |t, v| {
            let z = t.propagate(v[0], &g)?;
            project(t, z, seed)
        })?,
    ));

    let layout = ConvLayout {
        outer: 2,
        time: 4,
        inner: 3,
    };
    let xc = r(&[24, 2], &mut rng);
    let kc = r(&[2, 2, 2], &mut rng);
    let bc = r(&[2], &mut rng);
    out.push(record(
        "causal_conv",
        seed,
        check_gradients(&[xc.clone(), kc, bc], |t, v| {
            let z = t.causal_conv(v[0], v[1], v[2], layout)?;
            project(t, z, seed)
        })?,
    ));

    out.push(record(
        "swap_middle",
        seed,
        check_gradients(std::slice::from_ref(&xc), |t, v| {
            let z = t.swap_middle(v[0], [2, 4, 3, 2])?;
            project(t, z, seed)
        })?,
    ));
    out.push(record(
        "narrow",
        seed,
        check_gradients(std::slice::from_ref(&xc), |t, v| {
            let z = t.narrow(v[0], (2, 4, 6), 1, 2, &[12, 2])?;
            project(t, z, seed)
        })?,
    ));
    out.push(record(
        "reshape",
        seed,
        check_gradients(&[xc], |t, v| {
            let z = t.reshape(v[0], &[6, 8])?;
            project(t, z, seed)
        })?,
    ));
    out.push(record(
        "sum",
        seed,
        check_gradients(&[r(&[3, 3], &mut rng)], |t, v| Ok(t.sum(v[0])))?,
    ));

    let (p, q) = (r(&[4, 3], &mut rng), r(&[4, 3], &mut rng));
    out.push(record(
        "mse",
        seed,
        check_gradients(&[p.clone(), q.clone()], |t, v| t.mse(v[0], v[1], 4.0))?,
    ));
    for (name, form) in [
        ("kl_proper", KlForm::Proper),
        ("kl_literal", KlForm::Literal),
    ] {
        out.push(record(
            name,
            seed,
            check_gradients(&[p.clone(), q.clone()], |t, v| t.kl_rows(v[0], v[1], form))?,
        ));
    }
    let (s6, t6) = (r(&[6, 4], &mut rng), r(&[6, 4], &mut rng));
    out.push(record(
        "contrastive",
        seed,
        check_gradients(&[s6, t6], |t, v| t.contrastive(v[0], v[1], 3, 0.5))?,
    ));
    Ok(out)
}

/// A small dataset and graph for whole-model checks.
fn tiny_batch(
    n: usize,
    history: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WindowBatch> {
    let x = Tensor::uniform([n, history + horizon + 3], 0.0, 100.0, rng);
    let x = TrafficTensor::new(x, 5, None)?;
    let w = make_windows(
        &x,
        &WindowConfig {
            history,
            horizon,
            split: SplitConfig {
                train: 100.0,
                val: 0.0,
                test: 0.0,
            },
            ..WindowConfig::default()
        },
    )?;
    w.batch(&[0, 2])
}

fn tiny_teacher() -> TeacherConfig {
    TeacherConfig {
        layers: 2,
        dim: 3,
        kernel: 2,
        dropout: 0.0,
        leaky_slope: 0.1,
        history: 4,
        horizon: 2,
    }
}

fn tiny_student() -> StudentConfig {
    StudentConfig {
        layers: 3,
        dim: 3,
        history: 4,
        horizon: 2,
        conv_kernel: 0,
    }
}

/// Parameters moved off their structured init (zero biases would sit
/// exactly on a ReLU kink).
fn jittered<P: ParamSet>(p: &P, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    p.tensors()
        .into_iter()
        .map(|t| {
            let noise = Tensor::randn(t.shape().to_vec(), 0.1, rng);
            t.zip_map(&noise, |a, b| a + b).expect("same shape")
        })
        .collect()
}

/// Whole-model checks: teacher, student, student with the conv option, and
/// the joint distillation objective.
pub fn model_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let graph = random_graph(n, &mut rng)?;
    let batch = tiny_batch(n, 4, 2, &mut rng)?;
    let mut out = Vec::new();

    let tc = tiny_teacher();
    let tp = TeacherParams::init(&tc, &mut rng)?;
    let layers = tc.layers;
    let teacher_loss = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let vars = TeacherVars::from_vars(v.to_vec(), layers);
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let tr = teacher_forward(t, &vars, &tc, &batch, &graph, Mode::Eval, &mut no_rng)?;
        let y = t.constant(batch.normalized_targets());
        prediction_loss(t, tr.pred, y)
    };
    let inputs = jittered(&tp, &mut rng);
    out.push(record(
        "teacher_model",
        seed,
        check_gradients(&inputs, teacher_loss)?,
    ));

    for (name, conv) in [("student_model", 0), ("student_conv_model", 2)] {
        let sc = StudentConfig {
            conv_kernel: conv,
            ..tiny_student()
        };
        let sp = StudentParams::init(&sc, &mut rng)?;
        let inputs = jittered(&sp, &mut rng);
        let errs = check_gradients(&inputs, |t, v| {
            let vars = StudentVars::from_vars(v.to_vec(), sc.layers, conv > 0);
            let st = crate::student::student_forward(t, &vars, &sc, &batch)?;
            let y = t.constant(batch.normalized_targets());
            prediction_loss(t, st.pred, y)
        })?;
        out.push(record(name, seed, errs));
    }

    let teacher = Teacher::new(tc.clone(), tp, &graph)?;
    let acts = teacher.activations(&batch, Mode::Eval, &mut rng)?;
    let sc = tiny_student();
    let sp = StudentParams::init(&sc, &mut rng)?;
    let dc = DistillConfig {
        align_slots: Some(2),
        ..DistillConfig::default()
    };
    let inputs = jittered(&sp, &mut rng);
    let errs = check_gradients(&inputs, |t, v| {
        let vars = StudentVars::from_vars(v.to_vec(), sc.layers, false);
        let s = t.constant(acts.spatial.clone());
        let e = t.constant(acts.temporal.clone());
        Ok(distill_objective(t, &vars, &sc, s, e, &batch, &dc)?.total)
    })?;
    out.push(record("joint_objective", seed, errs));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_one_seed() {
        for c in op_suite(7).unwrap() {
            assert!(c.passed, "{} rel err {:?}", c.name, c.rel_errors);
        }
    }

    #[test]
    fn models_pass_one_seed() {
        for c in model_suite(7).unwrap() {
            assert!(c.passed, "{} rel err {:?}", c.name, c.rel_errors);
        }
    }

    #[test]
    fn square_sum_and_error_measure() {
        let x = Tensor::from_vec(vec![0.5, -0.7]);
        let errs = check_gradients(&[x], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(errs[0] < 1e-8);
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1.0, 2.1]);
        assert!(relative_error(&a, &b) > 1e-2);
    }
}
