//! Distribution alignment, contrastive alignment and the joint objective.
//!
//! Embeddings are `[rows × d]` with rows ordered `(window, slot, node)`, so
//! every consecutive block of `N` rows holds the nodes of one slot.

use serde::{Deserialize, Serialize};

use crate::autodiff::{KlForm, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// How summed loss terms are scaled within one window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over every `(node, slot)` anchor.
    #[default]
    Sum,
    /// Mean over anchors.
    Mean,
}

/// The four component losses and their weighted total, all scalar vars.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub prediction: Var,
    pub kl: Var,
    pub spatial: Var,
    pub temporal: Var,
    pub total: Var,
}

/// Keeps the last `slots` time slots of `[B·T·N × d]` embeddings.
pub fn align_slots(
    tape: &mut Tape,
    emb: Var,
    dims: (usize, usize, usize, usize),
    slots: usize,
) -> Result<Var> {
    let (b, t, n, d) = dims;
    if slots == 0 || slots > t {
        return Err(Error::Contract(format!(
            "cannot align {slots} slots of a {t}-slot embedding"
        )));
    }
    if slots == t {
        return Ok(emb);
    }
    tape.narrow(emb, (b, t, n * d), t - slots, slots, &[b * slots * n, d])
}

/// Weighted sum `L_S + λ1·L_KL + λ2·(L_P + L_E)`. Terms with a zero weight
/// are left out of the graph entirely.
pub fn joint_loss_var(
    tape: &mut Tape,
    terms: [Var; 4],
    lambda_kl: f64,
    lambda_contrastive: f64,
) -> Result<Var> {
    let [ls, kl, lp, le] = terms;
    let mut total = ls;
    if lambda_kl != 0.0 {
        let w = tape.scale(kl, lambda_kl);
        total = tape.add(total, w)?;
    }
    if lambda_contrastive != 0.0 {
        let c = tape.add(lp, le)?;
        let w = tape.scale(c, lambda_contrastive);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Value form of the joint objective.
pub fn joint_loss(
    ls: f64,
    kl: f64,
    lp: f64,
    le: f64,
    lambda_kl: f64,
    lambda_contrastive: f64,
) -> f64 {
    ls + lambda_kl * kl + lambda_contrastive * (lp + le)
}

/// Divergence between per-row softmax distributions over `d`, summed over
/// rows. Teacher and student are `[rows × d]`.
pub fn kl_alignment_loss(teacher: &Tensor, student: &Tensor, form: KlForm) -> Result<f64> {
    let mut tape = Tape::new();
    let t = tape.constant(teacher.clone());
    let s = tape.constant(student.clone());
    let l = tape.kl_rows(t, s, form)?;
    Ok(tape.value(l).item())
}

/// Contrastive alignment of student rows to the teacher's GCN-stage rows.
pub fn spatial_contrastive_loss(
    student: &Tensor,
    teacher: &Tensor,
    num_nodes: usize,
    tau: f64,
) -> Result<f64> {
    contrastive_value(student, teacher, num_nodes, tau)
}

/// Contrastive alignment of student rows to the teacher's TCN-stage rows.
pub fn temporal_contrastive_loss(
    student: &Tensor,
    teacher: &Tensor,
    num_nodes: usize,
    tau: f64,
) -> Result<f64> {
    contrastive_value(student, teacher, num_nodes, tau)
}

fn contrastive_value(student: &Tensor, teacher: &Tensor, group: usize, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let t = tape.constant(teacher.clone());
    let l = tape.contrastive(s, t, group, tau)?;
    Ok(tape.value(l).item())
}

/// Report-only weight from the alignment gradient analysis.
///
/// At slot `slot`, the student logits are normalized over the node axis
/// separately for each channel, giving `p[n][c]`; the weight
/// `(1/p_n)·(−p_j)·(−p_n)` is averaged over channels. `student` is one
/// window's `[slots·N × d]` embedding.
pub fn kl_gradient_weight(
    student: &Tensor,
    num_nodes: usize,
    slot: usize,
    n: usize,
    j: usize,
) -> Result<f64> {
    let (rows, d) = student.dims2()?;
    if num_nodes == 0
        || rows % num_nodes != 0
        || slot >= rows / num_nodes
        || n >= num_nodes
        || j >= num_nodes
    {
        return Err(Error::Contract(format!(
            "invalid index (slot {slot}, n {n}, j {j}) for {rows} rows of {num_nodes} nodes"
        )));
    }
    let block = &student.data()[slot * num_nodes * d..(slot + 1) * num_nodes * d];
    let mut col = vec![0.0; num_nodes];
    let mut total = 0.0;
    for c in 0..d {
        for (k, v) in col.iter_mut().enumerate() {
            *v = block[k * d + c];
        }
        softmax_in_place(&mut col, 1, num_nodes, 1);
        let (pn, pj) = (col[n], col[j]);
        total += (1.0 / pn) * (-pj) * (-pn);
    }
    Ok(total / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form() {
        let t = Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let s = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let v = kl_alignment_loss(&t, &s, KlForm::Proper).unwrap();
        let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.130812).abs() < 1e-6);
        assert!(kl_alignment_loss(&t, &t, KlForm::Proper).unwrap().abs() < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        // Positive cosine 1, sole negative −1, τ = 1.
        let s = Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let t = s.clone();
        let v = spatial_contrastive_loss(&s, &t, 2, 1.0).unwrap();
        assert!((v + 4.0).abs() < 1e-12, "{v}");
        let u = Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(temporal_contrastive_loss(&u, &u, 2, 0.5).unwrap().abs() < 1e-12);
        assert!(spatial_contrastive_loss(&u, &u, 1, 0.5).is_err());
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint_loss(1.0, 2.0, 3.0, 4.0, 0.5, 0.25), 3.75);
        assert_eq!(joint_loss(1.5, 2.0, 3.0, 4.0, 0.0, 0.0), 1.5);
    }

    #[test]
    fn omega_uniform_and_positive() {
        let d = 4;
        let s = Tensor::zeros([3 * 5, d]);
        let w = kl_gradient_weight(&s, 5, 2, 1, 3).unwrap();
        assert!((w - 0.2).abs() < 1e-15);
        let r = Tensor::from_vec((0..24).map(|i| (i as f64 * 0.37).sin()).collect())
            .reshape([6, 4])
            .unwrap();
        assert!(kl_gradient_weight(&r, 3, 1, 0, 2).unwrap() > 0.0);
        assert!(kl_gradient_weight(&r, 3, 2, 0, 0).is_err());
    }

    #[test]
    fn slot_alignment_keeps_tail() {
        let mut tape = Tape::new();
        // B=1, T=3, N=2, d=1: rows (t, n) = value 10t + n.
        let x = tape.constant(Tensor::new([6, 1], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap());
        let y = align_slots(&mut tape, x, (1, 3, 2, 1), 2).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 11.0, 20.0, 21.0]);
        assert_eq!(align_slots(&mut tape, x, (1, 3, 2, 1), 3).unwrap(), x);
        assert!(align_slots(&mut tape, x, (1, 3, 2, 1), 4).is_err());
    }
}
