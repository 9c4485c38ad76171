//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so inputs always precede their consumers and the recorded graph is
//! acyclic. [`Tape::backward`] walks the record in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::tensor::{axis_split, gemm, log_softmax_row, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norms below this are treated as zero; cosine similarity is then 0.
pub const COSINE_EPS: f64 = 1e-12;

/// Which divergence the distribution-alignment op computes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `Σ p_T (log p_T − log p_S)`, non-negative and zero at a match.
    #[default]
    Proper,
    /// `Σ t · log softmax(s)` with raw teacher values `t`, as it is often
    /// printed; kept for comparisons.
    Literal,
}

/// Layout of a causal convolution input `[outer, time, inner, channels]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayout {
    pub outer: usize,
    pub time: usize,
    pub inner: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Mask(Var, Vec<f64>),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Propagate(Var, SpatialGraph),
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
        layout: ConvLayout,
    },
    SwapMiddle {
        x: Var,
        dims: [usize; 4],
    },
    Narrow {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        count: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Var,
        denom: f64,
    },
    Kl {
        teacher: Var,
        student: Var,
        form: KlForm,
    },
    Contrastive {
        student: Var,
        teacher: Var,
        group: usize,
        tau: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`. Every gradient-requiring leaf has an
    /// entry (zeros when the loss does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) || value.all_finite(),
            "non-finite output from finite inputs in {op:?}"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of shape {:?} does not match {n} columns",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Contract(format!(
                "leaky slope {slope} outside (0, 1)"
            )));
        }
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        Ok(self.push(out, Op::LeakyRelu(x, slope), &[x]))
    }

    /// Inverted dropout. The identity when `train` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Mask(x, mask), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.value(x).shape(), axis)?;
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Applies the graph's normalized adjacency to each consecutive block of
    /// `N` rows of an `[blocks·N × d]` matrix.
    pub fn propagate(&mut self, x: Var, graph: &SpatialGraph) -> Result<Var> {
        let out = graph.propagate(self.value(x))?;
        Ok(self.push(out, Op::Propagate(x, graph.clone()), &[x]))
    }

    /// Causal 1-D convolution along the time axis of an
    /// `[outer, time, inner, channels]` input (stored as rank 2 or 4).
    ///
    /// `kernel` is `[f, c_in, c_out]`; tap `f-1` multiplies the current step
    /// and tap `k` the step `f-1-k` earlier. The input is left-padded with
    /// `f-1` zeros so the output keeps the input length.
    pub fn causal_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        layout: ConvLayout,
    ) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let &[f, cin, cout] = kv.shape() else {
            return Err(Error::shape(format!(
                "conv kernel must be [f, c_in, c_out], got {:?}",
                kv.shape()
            )));
        };
        if cin != cout {
            return Err(Error::shape(format!(
                "conv kernel must preserve channels, got [{f}, {cin}, {cout}]"
            )));
        }
        let ch = cin;
        if xv.len() != layout.outer * layout.time * layout.inner * ch {
            return Err(Error::shape(format!(
                "conv input {:?} does not match layout {layout:?} with {ch} channels",
                xv.shape()
            )));
        }
        if f > layout.time {
            return Err(Error::shape(format!(
                "kernel size {f} exceeds sequence length {}",
                layout.time
            )));
        }
        if self.value(bias).len() != ch {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match {ch} channels",
                self.value(bias).shape()
            )));
        }
        let out = conv_values(xv.data(), kv, self.value(bias).data(), layout);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::CausalConv {
                x,
                kernel,
                bias,
                layout,
            },
            &[x, kernel, bias],
        ))
    }

    /// Swaps the two middle axes of `[a, b, c, d]`, returning `[a, c, b, d]`.
    pub fn swap_middle(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "cannot view {:?} as {dims:?}",
                xv.shape()
            )));
        }
        let out = swap_middle(xv.data(), dims);
        let out = Tensor::new([dims[0], dims[2], dims[1], dims[3]], out)?;
        Ok(self.push(out, Op::SwapMiddle { x, dims }, &[x]))
    }

    /// Keeps `count` entries starting at `start` along the middle axis of an
    /// `[outer, len, inner]` view.
    pub fn narrow(
        &mut self,
        x: Var,
        (outer, len, inner): (usize, usize, usize),
        start: usize,
        count: usize,
        out_shape: &[usize],
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != outer * len * inner || start + count > len || count == 0 {
            return Err(Error::shape(format!(
                "invalid narrow [{start}, {}) of {:?} viewed as [{outer}, {len}, {inner}]",
                start + count,
                xv.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&xv.data()[base..base + count * inner]);
        }
        let out = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// `Σ (pred − target)² / denom`.
    pub fn mse(&mut self, pred: Var, target: Var, denom: f64) -> Result<Var> {
        self.same_shape(pred, target, "squared-error loss")?;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(s / denom),
            Op::Mse {
                pred,
                target,
                denom,
            },
            &[pred, target],
        ))
    }

    /// Row-wise distribution alignment between `[rows × width]` teacher and
    /// student logits, summed over rows. Softmax runs along `width`.
    pub fn kl_rows(&mut self, teacher: Var, student: Var, form: KlForm) -> Result<Var> {
        self.same_shape(teacher, student, "distribution alignment")?;
        let (_, w) = self.value(student).dims2()?;
        let t = self.value(teacher).data();
        let s = self.value(student).data();
        let mut lq = vec![0.0; w];
        let mut lp = vec![0.0; w];
        let mut total = 0.0;
        for (tr, sr) in t.chunks_exact(w).zip(s.chunks_exact(w)) {
            log_softmax_row(sr, &mut lq);
            match form {
                KlForm::Proper => {
                    log_softmax_row(tr, &mut lp);
                    total += lp
                        .iter()
                        .zip(&lq)
                        .map(|(&a, &b)| a.exp() * (a - b))
                        .sum::<f64>();
                }
                KlForm::Literal => {
                    total += tr.iter().zip(&lq).map(|(&a, &b)| a * b).sum::<f64>();
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Kl {
                teacher,
                student,
                form,
            },
            &[teacher, student],
        ))
    }

    /// Contrastive alignment over groups of `group` consecutive rows.
    ///
    /// For every anchor row `n` of a group the term is
    /// `−log( exp(cos(s_n, t_n)/τ) / Σ_{n'≠n} exp(cos(s_n', t_n)/τ) )`:
    /// the positive pair is excluded from the denominator, so a term can be
    /// negative. Terms are summed over anchors and groups.
    pub fn contrastive(
        &mut self,
        student: Var,
        teacher: Var,
        group: usize,
        tau: f64,
    ) -> Result<Var> {
        self.same_shape(student, teacher, "contrastive alignment")?;
        if group < 2 {
            return Err(Error::Contract(
                "contrastive alignment needs at least 2 rows per group (empty negative set)".into(),
            ));
        }
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::Contract(format!(
                "temperature {tau} must be positive"
            )));
        }
        let (rows, w) = self.value(student).dims2()?;
        if rows % group != 0 {
            return Err(Error::shape(format!(
                "{rows} rows do not split into groups of {group}"
            )));
        }
        let s = self.value(student).data();
        let t = self.value(teacher).data();
        let mut total = 0.0;
        for g in 0..rows / group {
            let c = CosineBlock::new(
                &s[g * group * w..(g + 1) * group * w],
                &t[g * group * w..(g + 1) * group * w],
                group,
                w,
            );
            for n in 0..group {
                total += -c.cos(n, n) / tau + c.log_sum_neg(n, tau);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Contrastive {
                student,
                teacher,
                group,
                tau,
            },
            &[student, teacher],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), true, &mut ga, false);
                    accumulate(grads, *a, val(*a), ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, gd, false, &mut gb, false);
                    accumulate(grads, *b, val(*b), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, val(v), gd.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, val(*a), gd.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, val(*b), gd.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, val(*a), ga);
                }
                if wants(*b) {
                    let gb = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, val(*b), gb);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, val(*x), gd.to_vec());
                }
                if wants(*bias) {
                    let n = val(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks_exact(n) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    accumulate(grads, *bias, val(*bias), gb);
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(grads, *x, val(*x), gd.iter().map(|g| g * c).collect());
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let gx = gd
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::LeakyRelu(x, slope) => {
                if wants(*x) {
                    let gx = gd
                        .iter()
                        .zip(val(*x).data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                        .collect();
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::Mask(x, mask) => {
                if wants(*x) {
                    let gx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if wants(*x) {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..*len)
                                .map(|k| gd[base + k * inner] * y[base + k * inner])
                                .sum();
                            for k in 0..*len {
                                let p = base + k * inner;
                                gx[p] = y[p] * (gd[p] - dot);
                            }
                        }
                    }
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::Propagate(x, graph) => {
                if wants(*x) {
                    // The normalized adjacency is symmetric.
                    let (_, w) = val(*x).dims2()?;
                    let mut gx = vec![0.0; gd.len()];
                    graph.propagate_into(gd, w, &mut gx, false);
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::CausalConv {
                x,
                kernel,
                bias,
                layout,
            } => {
                let kv = val(*kernel);
                let f = kv.shape()[0];
                let ch = kv.shape()[1];
                let step = layout.inner * ch;
                let seq = layout.time * step;
                let xd = val(*x).data();
                if wants(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    for o in 0..layout.outer {
                        let gs = &gd[o * seq..(o + 1) * seq];
                        let gxs = &mut gx[o * seq..(o + 1) * seq];
                        for k in 0..f {
                            let shift = f - 1 - k;
                            let rows = (layout.time - shift) * layout.inner;
                            let kk = &kv.data()[k * ch * ch..(k + 1) * ch * ch];
                            gemm(
                                rows,
                                ch,
                                ch,
                                &gs[shift * step..],
                                false,
                                kk,
                                true,
                                gxs,
                                true,
                            );
                        }
                    }
                    accumulate(grads, *x, val(*x), gx);
                }
                if wants(*kernel) {
                    let mut gk = vec![0.0; kv.len()];
                    for o in 0..layout.outer {
                        let gs = &gd[o * seq..(o + 1) * seq];
                        let xs = &xd[o * seq..(o + 1) * seq];
                        for k in 0..f {
                            let shift = f - 1 - k;
                            let rows = (layout.time - shift) * layout.inner;
                            gemm(
                                ch,
                                rows,
                                ch,
                                xs,
                                true,
                                &gs[shift * step..],
                                false,
                                &mut gk[k * ch * ch..(k + 1) * ch * ch],
                                true,
                            );
                        }
                    }
                    accumulate(grads, *kernel, kv, gk);
                }
                if wants(*bias) {
                    let mut gb = vec![0.0; ch];
                    for row in gd.chunks_exact(ch) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    accumulate(grads, *bias, val(*bias), gb);
                }
            }
            Op::SwapMiddle { x, dims } => {
                if wants(*x) {
                    let gx = swap_middle(gd, [dims[0], dims[2], dims[1], dims[3]]);
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::Narrow {
                x,
                outer,
                len,
                inner,
                start,
                count,
            } => {
                if wants(*x) {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..*outer {
                        let dst = o * len * inner + start * inner;
                        let src = o * count * inner;
                        gx[dst..dst + count * inner].copy_from_slice(&gd[src..src + count * inner]);
                    }
                    accumulate(grads, *x, val(*x), gx);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    accumulate(grads, *x, val(*x), gd.to_vec());
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    accumulate(grads, *x, val(*x), vec![gd[0]; val(*x).len()]);
                }
            }
            Op::Mse {
                pred,
                target,
                denom,
            } => {
                let c = 2.0 * gd[0] / denom;
                let diff: Vec<f64> = val(*pred)
                    .data()
                    .iter()
                    .zip(val(*target).data())
                    .map(|(p, t)| c * (p - t))
                    .collect();
                if wants(*target) {
                    accumulate(
                        grads,
                        *target,
                        val(*target),
                        diff.iter().map(|d| -d).collect(),
                    );
                }
                if wants(*pred) {
                    accumulate(grads, *pred, val(*pred), diff);
                }
            }
            Op::Kl {
                teacher,
                student,
                form,
            } => {
                let (_, w) = val(*student).dims2()?;
                let t = val(*teacher).data();
                let s = val(*student).data();
                let scale = gd[0];
                let mut gs = vec![0.0; s.len()];
                let mut gt = vec![0.0; t.len()];
                let mut lq = vec![0.0; w];
                let mut lp = vec![0.0; w];
                for (r, (tr, sr)) in t.chunks_exact(w).zip(s.chunks_exact(w)).enumerate() {
                    log_softmax_row(sr, &mut lq);
                    let gsr = &mut gs[r * w..(r + 1) * w];
                    let gtr = &mut gt[r * w..(r + 1) * w];
                    match form {
                        KlForm::Proper => {
                            log_softmax_row(tr, &mut lp);
                            let kl: f64 =
                                lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
                            for i in 0..w {
                                let p = lp[i].exp();
                                gsr[i] = scale * (lq[i].exp() - p);
                                gtr[i] = scale * p * ((lp[i] - lq[i]) - kl);
                            }
                        }
                        KlForm::Literal => {
                            let tsum: f64 = tr.iter().sum();
                            for i in 0..w {
                                gsr[i] = scale * (tr[i] - lq[i].exp() * tsum);
                                gtr[i] = scale * lq[i];
                            }
                        }
                    }
                }
                if wants(*student) {
                    accumulate(grads, *student, val(*student), gs);
                }
                if wants(*teacher) {
                    accumulate(grads, *teacher, val(*teacher), gt);
                }
            }
            Op::Contrastive {
                student,
                teacher,
                group,
                tau,
            } => {
                let (rows, w) = val(*student).dims2()?;
                let s = val(*student).data();
                let t = val(*teacher).data();
                let scale = gd[0];
                let mut gs = vec![0.0; s.len()];
                let mut gt = vec![0.0; t.len()];
                let gsize = group * w;
                for g in 0..rows / group {
                    let range = g * gsize..(g + 1) * gsize;
                    let c = CosineBlock::new(&s[range.clone()], &t[range.clone()], *group, w);
                    // dL/dcos(a, b) for student row a, teacher row b.
                    let mut dc = vec![0.0; group * group];
                    for n in 0..*group {
                        dc[n * group + n] -= scale / tau;
                        let weights = c.neg_weights(n, *tau);
                        for (m, wm) in weights {
                            dc[m * group + n] += scale * wm / tau;
                        }
                    }
                    c.chain(&dc, &mut gs[range.clone()], &mut gt[range]);
                }
                if wants(*student) {
                    accumulate(grads, *student, val(*student), gs);
                }
                if wants(*teacher) {
                    accumulate(grads, *teacher, val(*teacher), gt);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), g).expect("gradient shape"));
        }
    }
}

/// Forward causal convolution on raw `[outer, time, inner, ch]` data with
/// an already validated `[f, ch, ch]` kernel.
pub(crate) fn conv_values(
    x: &[f64],
    kernel: &Tensor,
    bias: &[f64],
    layout: ConvLayout,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    conv_into(x, kernel, bias, layout, &mut out);
    out
}

/// [`conv_values`] writing into `out`, which must have the input's length.
pub(crate) fn conv_into(
    x: &[f64],
    kernel: &Tensor,
    bias: &[f64],
    layout: ConvLayout,
    out: &mut [f64],
) {
    let (f, ch) = (kernel.shape()[0], kernel.shape()[1]);
    let step = layout.inner * ch;
    let seq = layout.time * step;
    for row in out.chunks_exact_mut(ch) {
        row.copy_from_slice(bias);
    }
    for o in 0..layout.outer {
        let xs = &x[o * seq..(o + 1) * seq];
        let os = &mut out[o * seq..(o + 1) * seq];
        for k in 0..f {
            let shift = f - 1 - k;
            let rows = (layout.time - shift) * layout.inner;
            let kk = &kernel.data()[k * ch * ch..(k + 1) * ch * ch];
            gemm(
                rows,
                ch,
                ch,
                &xs[..rows * ch],
                false,
                kk,
                false,
                &mut os[shift * step..],
                true,
            );
        }
    }
}

pub(crate) fn swap_middle(data: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    swap_middle_into(data, dims, &mut out);
    out
}

pub(crate) fn swap_middle_into(data: &[f64], [a, b, c, d]: [usize; 4], out: &mut [f64]) {
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
}

/// Pairwise cosines between student rows and teacher rows of one group.
struct CosineBlock<'a> {
    s: &'a [f64],
    t: &'a [f64],
    n: usize,
    w: usize,
    s_norm: Vec<f64>,
    t_norm: Vec<f64>,
    /// `cos[a * n + b] = cos(s_a, t_b)`.
    cos: Vec<f64>,
}

impl<'a> CosineBlock<'a> {
    fn new(s: &'a [f64], t: &'a [f64], n: usize, w: usize) -> Self {
        let norms = |x: &[f64]| -> Vec<f64> {
            x.chunks_exact(w)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let s_norm = norms(s);
        let t_norm = norms(t);
        let mut dots = vec![0.0; n * n];
        gemm(n, w, n, s, false, t, true, &mut dots, false);
        let cos = dots
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let (a, b) = (i / n, i % n);
                if s_norm[a] < COSINE_EPS || t_norm[b] < COSINE_EPS {
                    0.0
                } else {
                    d / (s_norm[a] * t_norm[b])
                }
            })
            .collect();
        Self {
            s,
            t,
            n,
            w,
            s_norm,
            t_norm,
            cos,
        }
    }

    fn cos(&self, a: usize, b: usize) -> f64 {
        self.cos[a * self.n + b]
    }

    /// `log Σ_{m≠anchor} exp(cos(s_m, t_anchor)/τ)`.
    fn log_sum_neg(&self, anchor: usize, tau: f64) -> f64 {
        let vals = (0..self.n)
            .filter(|&m| m != anchor)
            .map(|m| self.cos(m, anchor) / tau);
        let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
        vals.map(|v| (v - max).exp()).sum::<f64>().ln() + max
    }

    /// Softmax weights of the negatives of `anchor`.
    fn neg_weights(&self, anchor: usize, tau: f64) -> Vec<(usize, f64)> {
        let lse = self.log_sum_neg(anchor, tau);
        (0..self.n)
            .filter(|&m| m != anchor)
            .map(|m| (m, (self.cos(m, anchor) / tau - lse).exp()))
            .collect()
    }

    /// Chains `dL/dcos` into row gradients for both sides.
    fn chain(&self, dc: &[f64], gs: &mut [f64], gt: &mut [f64]) {
        let (n, w) = (self.n, self.w);
        for a in 0..n {
            if self.s_norm[a] < COSINE_EPS {
                continue;
            }
            for b in 0..n {
                let d = dc[a * n + b];
                if d == 0.0 || self.t_norm[b] < COSINE_EPS {
                    continue;
                }
                let c = self.cos(a, b);
                let (sa, tb) = (&self.s[a * w..(a + 1) * w], &self.t[b * w..(b + 1) * w]);
                let inv = 1.0 / (self.s_norm[a] * self.t_norm[b]);
                let s2 = self.s_norm[a] * self.s_norm[a];
                let t2 = self.t_norm[b] * self.t_norm[b];
                for i in 0..w {
                    gs[a * w + i] += d * (tb[i] * inv - c * sa[i] / s2);
                    gt[b * w + i] += d * (sa[i] * inv - c * tb[i] / t2);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x =
            tape.param(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 9.0]]).unwrap());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::zeros([2, 2]));
        let l = tape.scale(x, 2.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros([2, 2]));
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let x = tape.constant(Tensor::from_vec(vec![-2.0, 3.0]));
        let l = tape.leaky_relu(x, 0.1).unwrap();
        assert!((tape.value(l).data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(tape.value(l).data()[1], 3.0);

        let mut rng = rand::rng();
        let d = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        let d = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(d), tape.value(x));
        assert!(tape.leaky_relu(x, 1.5).is_err());
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_zeroes_or_rescales() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1000], 1.0));
        let d = tape.dropout(x, 0.25, true, &mut rng).unwrap();
        let v = tape.value(d).data();
        assert!(v.iter().all(|&e| e == 0.0 || (e - 4.0 / 3.0).abs() < 1e-15));
        let dropped = v.iter().filter(|&&e| e == 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");
    }

    fn conv1(input: &[f64], kernel: &[f64], bias: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let t = input.len();
        let f = kernel.len();
        let x = tape.constant(Tensor::new([t, 1], input.to_vec()).unwrap());
        let k = tape.constant(Tensor::new([f, 1, 1], kernel.to_vec()).unwrap());
        let b = tape.constant(Tensor::from_vec(vec![bias]));
        let y = tape
            .causal_conv(
                x,
                k,
                b,
                ConvLayout {
                    outer: 1,
                    time: t,
                    inner: 1,
                },
            )
            .unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn conv_sliding_window() {
        assert_eq!(
            conv1(&[1.0, 2.0, 3.0], &[1.0, 1.0], 0.0),
            vec![1.0, 3.0, 5.0]
        );
        assert_eq!(conv1(&[0.0; 4], &[0.3, -1.0, 2.0], 0.7), vec![0.7; 4]);
        assert!(std::panic::catch_unwind(|| conv1(&[1.0], &[1.0, 1.0], 0.0)).is_err());
    }

    #[test]
    fn conv_identity_kernel_multichannel() {
        let (t, d, f) = (5, 3, 3);
        let mut rng = rand::rng();
        let mut tape = Tape::new();
        let xv = Tensor::randn([t, d], 1.0, &mut rng);
        let mut kern = Tensor::zeros([f, d, d]);
        for c in 0..d {
            kern.set(&[f - 1, c, c], 1.0);
        }
        let x = tape.constant(xv.clone());
        let k = tape.constant(kern);
        let b = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        let y = tape
            .causal_conv(
                x,
                k,
                b,
                ConvLayout {
                    outer: 1,
                    time: t,
                    inner: 1,
                },
            )
            .unwrap();
        for ti in 0..t {
            for c in 0..d {
                let want = xv.get(&[ti, c]) + [0.5, -1.0, 2.0][c];
                assert!((tape.value(y).get(&[ti, c]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn swap_middle_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::new([2, 3, 2, 2], data).unwrap());
        let y = tape.swap_middle(x, [2, 3, 2, 2]).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 3, 2]);
        assert_eq!(
            tape.value(y).get(&[1, 0, 2, 1]),
            tape.value(x).get(&[1, 2, 0, 1])
        );
        let z = tape.swap_middle(y, [2, 2, 3, 2]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        let s = tape.param(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let l = tape.kl_rows(t, s, KlForm::Proper).unwrap();
        let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        assert!((want - 0.130_812).abs() < 1e-6);

        let same = tape.kl_rows(t, t, KlForm::Proper).unwrap();
        assert!(tape.value(same).item().abs() < 1e-15);
    }

    #[test]
    fn contrastive_closed_forms() {
        // Positive cosine 1, single negative cosine -1, tau 1 → -2 per anchor.
        let mut tape = Tape::new();
        let s = tape.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap());
        let t = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![-3.0, 0.0]]).unwrap());
        let l = tape.contrastive(s, t, 2, 1.0).unwrap();
        assert!((tape.value(l).item() + 4.0).abs() < 1e-12);

        // All cosines equal → every term is zero.
        let s = tape.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let t = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]).unwrap());
        let l = tape.contrastive(s, t, 2, 0.3).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let one = tape.param(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(tape.contrastive(one, one, 1, 1.0).is_err());
    }

    #[test]
    fn contrastive_zero_norm_guard() {
        let mut tape = Tape::new();
        let s = tape
            .param(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap());
        let t = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap(),
        );
        let l = tape.contrastive(s, t, 3, 0.5).unwrap();
        assert!(tape.value(l).item().is_finite());
        let g = tape.backward(l).unwrap();
        assert!(g.get(s).unwrap().all_finite());
        assert!(g.get(s).unwrap().data()[..2].iter().all(|&v| v == 0.0));
    }
}
