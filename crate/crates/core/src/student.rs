//! The graph-less student: Z-score embedding, a per-slot MLP shared across
//! nodes and time, and the same linear head as the teacher.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_into, ConvLayout, Tape, Var};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::model::{
    bind_params, embed_batch, embed_values, init, matmul_into, readout, readout_values, Forecaster,
    Manifest, ParamSet,
};
use crate::teacher::first_mismatch;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    /// MLP depth `L′`.
    pub layers: usize,
    pub dim: usize,
    pub history: usize,
    pub horizon: usize,
    /// Kernel size of an optional causal conv (plus residual) after the MLP.
    /// `0` keeps the student a pure MLP.
    pub conv_kernel: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 64,
            history: 12,
            horizon: 12,
            conv_kernel: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.history == 0 || self.horizon == 0 {
            return Err(Error::Contract(
                "student layers, dim, history and horizon must be >= 1".into(),
            ));
        }
        if self.conv_kernel > self.history {
            return Err(Error::Contract(format!(
                "conv kernel {} exceeds history {}",
                self.conv_kernel, self.history
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let d = self.dim;
        let mut m = vec![("base".to_string(), vec![d])];
        for l in 0..self.layers {
            m.push((format!("mlp.{l}.weight"), vec![d, d]));
            m.push((format!("mlp.{l}.bias"), vec![d]));
        }
        if self.conv_kernel > 0 {
            m.push(("conv.kernel".into(), vec![self.conv_kernel, d, d]));
            m.push(("conv.bias".into(), vec![d]));
        }
        m.push((
            "readout.weight".into(),
            vec![self.history * d, self.horizon],
        ));
        m.push(("readout.bias".into(), vec![self.horizon]));
        m
    }

    /// `L′(d² + d) + d + T·d·H + H` for the pure MLP.
    pub fn expected_param_count(&self) -> usize {
        let (l, d, t, h) = (self.layers, self.dim, self.history, self.horizon);
        let conv = if self.conv_kernel > 0 {
            self.conv_kernel * d * d + d
        } else {
            0
        };
        l * (d * d + d) + d + t * d * h + h + conv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams {
    pub base: Tensor,
    /// `(weight, bias)` per layer; weights are applied as `E · W`.
    pub mlp: Vec<(Tensor, Tensor)>,
    pub conv: Option<(Tensor, Tensor)>,
    pub readout_weight: Tensor,
    pub readout_bias: Tensor,
}

impl StudentParams {
    pub fn init<R: Rng + ?Sized>(cfg: &StudentConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, t, h) = (cfg.dim, cfg.history, cfg.horizon);
        let he = (2.0 / d as f64).sqrt();
        Ok(Self {
            base: init(&[d], 1.0, rng),
            mlp: (0..cfg.layers)
                .map(|_| (init(&[d, d], he, rng), Tensor::zeros([d])))
                .collect(),
            conv: (cfg.conv_kernel > 0).then(|| {
                let f = cfg.conv_kernel;
                (
                    init(&[f, d, d], 0.5 / ((f * d) as f64).sqrt(), rng),
                    Tensor::zeros([d]),
                )
            }),
            readout_weight: init(&[t * d, h], 1.0 / ((t * d) as f64).sqrt(), rng),
            readout_bias: Tensor::zeros([h]),
        })
    }
}

impl ParamSet for StudentParams {
    const ARCHITECTURE: &'static str = "lightst-student";

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.base];
        for (w, b) in &self.mlp {
            v.push(w);
            v.push(b);
        }
        if let Some((k, b)) = &self.conv {
            v.push(k);
            v.push(b);
        }
        v.push(&self.readout_weight);
        v.push(&self.readout_bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.base];
        for (w, b) in &mut self.mlp {
            v.push(w);
            v.push(b);
        }
        if let Some((k, b)) = &mut self.conv {
            v.push(k);
            v.push(b);
        }
        v.push(&mut self.readout_weight);
        v.push(&mut self.readout_bias);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = vec!["base".to_string()];
        for l in 0..self.mlp.len() {
            v.push(format!("mlp.{l}.weight"));
            v.push(format!("mlp.{l}.bias"));
        }
        if self.conv.is_some() {
            v.push("conv.kernel".into());
            v.push("conv.bias".into());
        }
        v.push("readout.weight".into());
        v.push("readout.bias".into());
        v
    }
}

#[derive(Clone, Debug)]
pub struct StudentVars {
    pub all: Vec<Var>,
    pub base: Var,
    pub mlp: Vec<(Var, Var)>,
    pub conv: Option<(Var, Var)>,
    pub readout_weight: Var,
    pub readout_bias: Var,
}

impl StudentVars {
    pub fn bind(params: &StudentParams, tape: &mut Tape, trainable: bool) -> Self {
        Self::from_vars(
            bind_params(params, tape, trainable),
            params.mlp.len(),
            params.conv.is_some(),
        )
    }

    /// Splits leaves given in manifest order.
    pub fn from_vars(all: Vec<Var>, layers: usize, conv: bool) -> Self {
        let l = layers;
        let mlp = (0..l).map(|i| (all[1 + 2 * i], all[2 + 2 * i])).collect();
        let mut next = 1 + 2 * l;
        let conv = conv.then(|| {
            next += 2;
            (all[next - 2], all[next - 1])
        });
        Self {
            base: all[0],
            mlp,
            conv,
            readout_weight: all[next],
            readout_bias: all[next + 1],
            all,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudentTrace {
    /// `Ẽ^(S)`, `[B·T·N × d]` in the teacher's row order.
    pub embedding: Var,
    /// Standardized predictions `[B·N × H]`.
    pub pred: Var,
}

/// Student pass. Takes no graph: each output row depends only on that
/// node's own window.
fn check_batch(cfg: &StudentConfig, batch: &WindowBatch) -> Result<()> {
    let t = batch.history_len();
    if t != cfg.history || batch.horizon() != cfg.horizon {
        return Err(Error::shape(format!(
            "batch windows are {t}->{} steps, student expects {}->{}",
            batch.horizon(),
            cfg.history,
            cfg.horizon
        )));
    }
    Ok(())
}

pub fn student_forward(
    tape: &mut Tape,
    vars: &StudentVars,
    cfg: &StudentConfig,
    batch: &WindowBatch,
) -> Result<StudentTrace> {
    let (b, n, t) = (batch.len(), batch.num_nodes(), batch.history_len());
    check_batch(cfg, batch)?;
    let mut h = embed_batch(tape, batch, vars.base)?;
    let last = vars.mlp.len() - 1;
    for (i, &(w, bias)) in vars.mlp.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_bias(z, bias)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    if let Some((k, bias)) = vars.conv {
        let layout = ConvLayout {
            outer: b,
            time: t,
            inner: n,
        };
        let c = tape.causal_conv(h, k, bias, layout)?;
        h = tape.add(c, h)?;
    }
    let pred = readout(
        tape,
        h,
        (b, t, n, cfg.dim),
        vars.readout_weight,
        vars.readout_bias,
    )?;
    Ok(StudentTrace { embedding: h, pred })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentActivations {
    pub embedding: Tensor,
    pub prediction_normalized: Tensor,
    /// Predictions in volume units, `[B·N × H]`.
    pub prediction: Tensor,
}

#[derive(Clone, Debug)]
pub struct Student {
    pub config: StudentConfig,
    pub params: StudentParams,
}

impl Student {
    pub fn new(config: StudentConfig, params: StudentParams) -> Result<Self> {
        config.validate()?;
        let (want, got) = (config.manifest(), params.manifest());
        if want != got {
            return Err(Error::shape(format!(
                "student parameters do not match the configuration: {}",
                first_mismatch(&want, &got)
            )));
        }
        Ok(Self { config, params })
    }

    pub fn activations(&self, batch: &WindowBatch) -> Result<StudentActivations> {
        let mut tape = Tape::new();
        let vars = StudentVars::bind(&self.params, &mut tape, false);
        let tr = student_forward(&mut tape, &vars, &self.config, batch)?;
        let pred = tape.value(tr.pred).clone();
        Ok(StudentActivations {
            embedding: tape.value(tr.embedding).clone(),
            prediction: batch.denormalize(&pred)?,
            prediction_normalized: pred,
        })
    }
}

impl Forecaster for Student {
    fn tag(&self) -> &str {
        "student"
    }

    /// Forward without recording a tape. Matches [`student_forward`] bit
    /// for bit.
    fn predict_normalized(&self, batch: &WindowBatch) -> Result<Tensor> {
        let (b, n, t) = (batch.len(), batch.num_nodes(), batch.history_len());
        check_batch(&self.config, batch)?;
        let p = &self.params;
        let (rows, d) = (b * t * n, self.config.dim);
        let mut h = embed_values(batch, &p.base)?.into_data();
        let mut tmp = vec![0.0; h.len()];
        let last = p.mlp.len() - 1;
        for (i, (w, bias)) in p.mlp.iter().enumerate() {
            matmul_into(&h, rows, w, &mut tmp)?;
            std::mem::swap(&mut h, &mut tmp);
            for row in h.chunks_exact_mut(d) {
                for (v, bb) in row.iter_mut().zip(bias.data()) {
                    *v += bb;
                    if i < last {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        if let Some((k, bias)) = &p.conv {
            let layout = ConvLayout {
                outer: b,
                time: t,
                inner: n,
            };
            conv_into(&h, k, bias.data(), layout, &mut tmp);
            for (v, c) in h.iter_mut().zip(&tmp) {
                *v += c;
            }
        }
        readout_values(
            &h,
            (b, t, n, d),
            &p.readout_weight,
            &p.readout_bias,
            &mut tmp,
        )
    }
}

/// Same contract as [`crate::teacher::teacher_loss`].
pub fn student_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    crate::teacher::teacher_loss(pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::data::{make_windows, SplitConfig, TrafficTensor, WindowConfig};

    fn cfg() -> StudentConfig {
        StudentConfig {
            layers: 3,
            dim: 5,
            history: 4,
            horizon: 2,
            conv_kernel: 0,
        }
    }

    fn windows(x: Tensor) -> crate::data::WindowedData {
        let x = TrafficTensor::new(x, 5, None).unwrap();
        make_windows(
            &x,
            &WindowConfig {
                history: 4,
                horizon: 2,
                split: SplitConfig {
                    train: 100.0,
                    val: 0.0,
                    test: 0.0,
                },
                ..WindowConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn param_count_formula() {
        let c = cfg();
        let p = StudentParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.num_params(), 3 * (25 + 5) + 5 + 4 * 5 * 2 + 2);
        assert_eq!(p.num_params(), c.expected_param_count());
        assert_eq!(p.manifest(), c.manifest());
        let d = StudentConfig::default();
        let p = StudentParams::init(&d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.num_params(), 3 * (64 * 64 + 64) + 64 + 12 * 64 * 12 + 12);
    }

    #[test]
    fn constant_window_gives_bias() {
        let w = windows(Tensor::full([3, 10], 42.0));
        let mut p = StudentParams::init(&cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        p.readout_bias = Tensor::from_vec(vec![1.0, -2.0]);
        let s = Student::new(cfg(), p).unwrap();
        let a = s.activations(&w.batch(&[0, 1]).unwrap()).unwrap();
        assert!(a.embedding.data().iter().all(|&v| v == 0.0));
        for row in a.prediction.data().chunks(2) {
            assert_eq!(row, &[43.0, 40.0]);
        }
    }

    #[test]
    fn identical_windows_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor::uniform([3, 10], 0.0, 9.0, &mut rng);
        for t in 0..10 {
            let v = x.get(&[0, t]);
            x.set(&[2, t], v);
        }
        let w = windows(x);
        let s = Student::new(cfg(), StudentParams::init(&cfg(), &mut rng).unwrap()).unwrap();
        let a = s.activations(&w.batch(&[1]).unwrap()).unwrap();
        let d = 5;
        for t in 0..4 {
            let row = |n: usize| &a.embedding.data()[(t * 3 + n) * d..(t * 3 + n + 1) * d];
            assert_eq!(row(0), row(2));
        }
        let p = a.prediction.data();
        assert_eq!(&p[0..2], &p[4..6]);
    }

    #[test]
    fn node_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([4, 12], 0.0, 9.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let mut xp = Tensor::zeros([4, 12]);
        for (i, &p) in perm.iter().enumerate() {
            for t in 0..12 {
                xp.set(&[i, t], x.get(&[p, t]));
            }
        }
        let s = Student::new(cfg(), StudentParams::init(&cfg(), &mut rng).unwrap()).unwrap();
        let a = s.predict(&windows(x).batch(&[3]).unwrap()).unwrap();
        let b = s.predict(&windows(xp).batch(&[3]).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.data()[i * 2..i * 2 + 2], a.data()[p * 2..p * 2 + 2]);
        }
    }

    #[test]
    fn conv_flag_adds_parameters() {
        let c = StudentConfig {
            conv_kernel: 2,
            ..cfg()
        };
        let p = StudentParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.num_params(), c.expected_param_count());
        let w = windows(Tensor::uniform(
            [3, 10],
            0.0,
            5.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        ));
        let s = Student::new(c, p).unwrap();
        assert!(s.predict(&w.batch(&[0]).unwrap()).unwrap().all_finite());
    }

    #[test]
    fn loss_examples() {
        let y = Tensor::new([2, 1], vec![0.0, 0.0]).unwrap();
        let p = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(student_loss(&p, &y).unwrap(), 12.5);
        assert_eq!(student_loss(&y, &y).unwrap(), 0.0);
    }
}
