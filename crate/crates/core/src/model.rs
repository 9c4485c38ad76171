//! Pieces shared by the teacher and the student: named parameter sets, the
//! Z-score input embedding, and the linear readout head.

use rand::Rng;

use crate::autodiff::{swap_middle_into, Tape, Var};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Train mode enables dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Name and shape of every parameter tensor, in a fixed order.
pub type Manifest = Vec<(String, Vec<usize>)>;

/// A model's learnable tensors, exposed in manifest order.
pub trait ParamSet {
    /// Tag stored in checkpoints to distinguish architectures.
    const ARCHITECTURE: &'static str;

    fn tensors(&self) -> Vec<&Tensor>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn names(&self) -> Vec<String>;

    fn manifest(&self) -> Manifest {
        self.names()
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Replaces every tensor; shapes must match the current ones.
    fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        let names = self.names();
        let mut slots = self.tensors_mut();
        if values.len() != slots.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for ((slot, v), name) in slots.iter_mut().zip(values).zip(names) {
            if slot.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "parameter `{name}`: expected {:?}, got {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            **slot = v;
        }
        Ok(())
    }
}

/// Records every parameter on the tape, returning the leaves in manifest order.
pub fn bind_params<P: ParamSet>(params: &P, tape: &mut Tape, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .into_iter()
        .map(|t| tape.leaf(t.clone(), trainable))
        .collect()
}

/// Embeds standardized histories: row `(b, t, n)` becomes `z · e`.
/// Returns `[B·T·N × d]`.
pub fn embed_batch(tape: &mut Tape, batch: &WindowBatch, base: Var) -> Result<Var> {
    let d = tape.value(base).len();
    let z = tape.constant(batch.normalized_history());
    let e = tape.reshape(base, &[1, d])?;
    tape.matmul(z, e)
}

/// Linear head from per-node flattened `[T·d]` embeddings to `H` outputs.
/// `emb` is `[B·T·N × d]`; the result is `[B·N × H]`.
pub fn readout(
    tape: &mut Tape,
    emb: Var,
    dims: (usize, usize, usize, usize),
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let (b, t, n, d) = dims;
    let per_node = tape.swap_middle(emb, [b, t, n, d])?;
    let flat = tape.reshape(per_node, &[b * n, t * d])?;
    let out = tape.matmul(flat, weight)?;
    tape.add_bias(out, bias)
}

/// Tape-free [`embed_batch`].
pub(crate) fn embed_values(batch: &WindowBatch, base: &Tensor) -> Result<Tensor> {
    let e = base.clone().reshape([1, base.len()])?;
    batch.normalized_history().matmul(&e)
}

/// `out[rows×n] = x[rows×k] · w[k×n]`.
pub(crate) fn matmul_into(x: &[f64], rows: usize, w: &Tensor, out: &mut [f64]) -> Result<()> {
    let (k, n) = w.dims2()?;
    if x.len() != rows * k || out.len() != rows * n {
        return Err(Error::shape(format!(
            "cannot multiply {rows} rows of {} values by {:?}",
            x.len() / rows.max(1),
            w.shape()
        )));
    }
    gemm(rows, k, n, x, false, w.data(), false, out, false);
    Ok(())
}

/// Tape-free [`readout`]; `scratch` must have the embedding's length.
pub(crate) fn readout_values(
    emb: &[f64],
    (b, t, n, d): (usize, usize, usize, usize),
    weight: &Tensor,
    bias: &Tensor,
    scratch: &mut [f64],
) -> Result<Tensor> {
    if emb.len() != b * t * n * d || scratch.len() != emb.len() {
        return Err(Error::shape(format!(
            "cannot view {} values as [{b}, {t}, {n}, {d}]",
            emb.len()
        )));
    }
    swap_middle_into(emb, [b, t, n, d], scratch);
    let h = weight.dims2()?.1;
    let mut out = vec![0.0; b * n * h];
    matmul_into(scratch, b * n, weight, &mut out)?;
    let mut out = Tensor::new([b * n, h], out)?;
    for row in out.data_mut().chunks_exact_mut(h) {
        for (o, bb) in row.iter_mut().zip(bias.data()) {
            *o += bb;
        }
    }
    Ok(out)
}

/// Scaled Gaussian initialization.
pub(crate) fn init<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// A trained model that maps a batch of windows to predictions.
pub trait Forecaster {
    fn tag(&self) -> &str;

    /// Standardized predictions `[B·N × H]`.
    fn predict_normalized(&self, batch: &WindowBatch) -> Result<Tensor>;

    /// Predictions in volume units.
    fn predict(&self, batch: &WindowBatch) -> Result<Tensor> {
        batch.denormalize(&self.predict_normalized(batch)?)
    }
}
