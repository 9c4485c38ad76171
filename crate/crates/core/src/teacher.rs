//! The graph teacher: Z-score embedding, time-specific GCN layers summed
//! across depth, a two-layer causal TCN with residuals, and a linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_into, ConvLayout, Tape, Var};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::model::{
    bind_params, embed_batch, embed_values, init, matmul_into, readout, readout_values, Forecaster,
    Manifest, Mode, ParamSet,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Number of message-passing layers `L`.
    pub layers: usize,
    pub dim: usize,
    /// Temporal kernel size `f`.
    pub kernel: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub history: usize,
    pub horizon: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: 64,
            kernel: 3,
            dropout: 0.1,
            leaky_slope: 0.01,
            history: 12,
            horizon: 12,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.history == 0 || self.horizon == 0 {
            return Err(Error::Contract(
                "teacher layers, dim, history and horizon must be >= 1".into(),
            ));
        }
        if self.kernel == 0 || self.kernel > self.history {
            return Err(Error::Contract(format!(
                "kernel size {} must be in [1, history = {}]",
                self.kernel, self.history
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Manifest {
        let (d, f) = (self.dim, self.kernel);
        let mut m = vec![("base".to_string(), vec![d])];
        for l in 0..self.layers {
            m.push((format!("gcn.{l}.weight"), vec![d, d]));
        }
        for k in 0..2 {
            m.push((format!("tcn.{k}.kernel"), vec![f, d, d]));
            m.push((format!("tcn.{k}.bias"), vec![d]));
        }
        m.push((
            "readout.weight".into(),
            vec![self.history * d, self.horizon],
        ));
        m.push(("readout.bias".into(), vec![self.horizon]));
        m
    }
}

/// Teacher weights. GCN weights are stored already transposed, so a layer
/// computes `Â · E · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams {
    pub base: Tensor,
    pub gcn: Vec<Tensor>,
    pub tcn_kernels: [Tensor; 2],
    pub tcn_biases: [Tensor; 2],
    pub readout_weight: Tensor,
    pub readout_bias: Tensor,
}

impl TeacherParams {
    pub fn init<R: Rng + ?Sized>(cfg: &TeacherConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, f, t, h) = (cfg.dim, cfg.kernel, cfg.history, cfg.horizon);
        let df = d as f64;
        Ok(Self {
            base: init(&[d], 1.0, rng),
            gcn: (0..cfg.layers)
                .map(|_| init(&[d, d], (1.0 / df).sqrt(), rng))
                .collect(),
            tcn_kernels: [0, 1].map(|_| init(&[f, d, d], 0.5 / (f as f64 * df).sqrt(), rng)),
            tcn_biases: [Tensor::zeros([d]), Tensor::zeros([d])],
            readout_weight: init(&[t * d, h], 1.0 / ((t * d) as f64).sqrt(), rng),
            readout_bias: Tensor::zeros([h]),
        })
    }
}

impl ParamSet for TeacherParams {
    const ARCHITECTURE: &'static str = "lightst-teacher";

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.base];
        v.extend(self.gcn.iter());
        for k in 0..2 {
            v.push(&self.tcn_kernels[k]);
            v.push(&self.tcn_biases[k]);
        }
        v.push(&self.readout_weight);
        v.push(&self.readout_bias);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.base];
        v.extend(self.gcn.iter_mut());
        let [k0, k1] = &mut self.tcn_kernels;
        let [b0, b1] = &mut self.tcn_biases;
        v.extend([k0, b0, k1, b1]);
        v.push(&mut self.readout_weight);
        v.push(&mut self.readout_bias);
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = vec!["base".to_string()];
        v.extend((0..self.gcn.len()).map(|l| format!("gcn.{l}.weight")));
        for k in 0..2 {
            v.push(format!("tcn.{k}.kernel"));
            v.push(format!("tcn.{k}.bias"));
        }
        v.push("readout.weight".into());
        v.push("readout.bias".into());
        v
    }
}

/// Teacher parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct TeacherVars {
    pub all: Vec<Var>,
    pub base: Var,
    pub gcn: Vec<Var>,
    pub tcn_kernels: [Var; 2],
    pub tcn_biases: [Var; 2],
    pub readout_weight: Var,
    pub readout_bias: Var,
}

impl TeacherVars {
    pub fn bind(params: &TeacherParams, tape: &mut Tape, trainable: bool) -> Self {
        Self::from_vars(bind_params(params, tape, trainable), params.gcn.len())
    }

    /// Splits leaves given in manifest order.
    pub fn from_vars(all: Vec<Var>, layers: usize) -> Self {
        let l = layers;
        Self {
            base: all[0],
            gcn: all[1..=l].to_vec(),
            tcn_kernels: [all[l + 1], all[l + 3]],
            tcn_biases: [all[l + 2], all[l + 4]],
            readout_weight: all[l + 5],
            readout_bias: all[l + 6],
            all,
        }
    }
}

/// Per-layer spatial embeddings `E^(0..=L)` and their sum.
#[derive(Clone, Debug)]
pub struct GcnOutput {
    pub layers: Vec<Var>,
    pub summed: Var,
}

/// Message passing on `[blocks·N × d]` input, one block per time slot:
/// `E^(l) = ReLU(Â E^(l-1) W^(l-1))`, then `E = Σ_{l=0}^{L} E^(l)`.
pub fn gcn_forward(
    tape: &mut Tape,
    e0: Var,
    graph: &SpatialGraph,
    weights: &[Var],
) -> Result<GcnOutput> {
    if weights.is_empty() {
        return Err(Error::Contract(
            "message passing needs at least one layer".into(),
        ));
    }
    let mut layers = vec![e0];
    let mut summed = e0;
    let mut h = e0;
    for &w in weights {
        let hw = tape.matmul(h, w)?;
        let mixed = tape.propagate(hw, graph)?;
        h = tape.relu(mixed);
        layers.push(h);
        summed = tape.add(summed, h)?;
    }
    Ok(GcnOutput { layers, summed })
}

/// Two stacked causal conv layers, each `LeakyReLU(dropout(conv(x) + b) + x)`.
#[allow(clippy::too_many_arguments)]
pub fn tcn_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    layout: ConvLayout,
    kernels: [Var; 2],
    biases: [Var; 2],
    dropout: f64,
    slope: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let mut h = x;
    for k in 0..2 {
        let c = tape.causal_conv(h, kernels[k], biases[k], layout)?;
        let c = tape.dropout(c, dropout, mode.is_train(), rng)?;
        let r = tape.add(c, h)?;
        h = tape.leaky_relu(r, slope)?;
    }
    Ok(h)
}

/// Handles to every intermediate of one teacher pass.
#[derive(Clone, Debug)]
pub struct TeacherTrace {
    /// `E^(0)` through `E^(L)`, each `[B·T·N × d]`.
    pub layers: Vec<Var>,
    /// Cross-layer sum, the GCN-stage embedding.
    pub spatial: Var,
    /// TCN output, same shape as `spatial`.
    pub temporal: Var,
    /// Standardized predictions `[B·N × H]`.
    pub pred: Var,
}

fn check_batch(cfg: &TeacherConfig, graph: &SpatialGraph, batch: &WindowBatch) -> Result<()> {
    let (n, t) = (batch.num_nodes(), batch.history_len());
    if graph.num_nodes() != n {
        return Err(Error::shape(format!(
            "graph has {} nodes but the batch has {n}",
            graph.num_nodes()
        )));
    }
    if t != cfg.history || batch.horizon() != cfg.horizon {
        return Err(Error::shape(format!(
            "batch windows are {t}->{} steps, teacher expects {}->{}",
            batch.horizon(),
            cfg.history,
            cfg.horizon
        )));
    }
    Ok(())
}

pub fn teacher_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &TeacherVars,
    cfg: &TeacherConfig,
    batch: &WindowBatch,
    graph: &SpatialGraph,
    mode: Mode,
    rng: &mut R,
) -> Result<TeacherTrace> {
    let (b, n, t) = (batch.len(), batch.num_nodes(), batch.history_len());
    check_batch(cfg, graph, batch)?;
    let e0 = embed_batch(tape, batch, vars.base)?;
    let gcn = gcn_forward(tape, e0, graph, &vars.gcn)?;
    let layout = ConvLayout {
        outer: b,
        time: t,
        inner: n,
    };
    let temporal = tcn_forward(
        tape,
        gcn.summed,
        layout,
        vars.tcn_kernels,
        vars.tcn_biases,
        cfg.dropout,
        cfg.leaky_slope,
        mode,
        rng,
    )?;
    let pred = readout(
        tape,
        temporal,
        (b, t, n, cfg.dim),
        vars.readout_weight,
        vars.readout_bias,
    )?;
    Ok(TeacherTrace {
        layers: gcn.layers,
        spatial: gcn.summed,
        temporal,
        pred,
    })
}

/// Plain values of one teacher pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherActivations {
    pub layers: Vec<Tensor>,
    pub spatial: Tensor,
    pub temporal: Tensor,
    pub prediction_normalized: Tensor,
    /// Predictions in volume units, `[B·N × H]`.
    pub prediction: Tensor,
}

/// A teacher bound to its graph.
#[derive(Clone, Debug)]
pub struct Teacher<'g> {
    pub config: TeacherConfig,
    pub params: TeacherParams,
    pub graph: &'g SpatialGraph,
}

impl<'g> Teacher<'g> {
    pub fn new(
        config: TeacherConfig,
        params: TeacherParams,
        graph: &'g SpatialGraph,
    ) -> Result<Self> {
        config.validate()?;
        let want = config.manifest();
        let got = params.manifest();
        if want != got {
            return Err(Error::shape(format!(
                "teacher parameters do not match the configuration: {}",
                first_mismatch(&want, &got)
            )));
        }
        Ok(Self {
            config,
            params,
            graph,
        })
    }

    pub fn activations<R: Rng + ?Sized>(
        &self,
        batch: &WindowBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TeacherActivations> {
        let mut tape = Tape::new();
        let vars = TeacherVars::bind(&self.params, &mut tape, false);
        let tr = teacher_forward(&mut tape, &vars, &self.config, batch, self.graph, mode, rng)?;
        let pred = tape.value(tr.pred).clone();
        Ok(TeacherActivations {
            layers: tr.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            spatial: tape.value(tr.spatial).clone(),
            temporal: tape.value(tr.temporal).clone(),
            prediction: batch.denormalize(&pred)?,
            prediction_normalized: pred,
        })
    }
}

impl Forecaster for Teacher<'_> {
    fn tag(&self) -> &str {
        "teacher"
    }

    /// Eval-mode forward without recording a tape. Matches
    /// [`teacher_forward`] bit for bit.
    fn predict_normalized(&self, batch: &WindowBatch) -> Result<Tensor> {
        let (b, n, t) = (batch.len(), batch.num_nodes(), batch.history_len());
        check_batch(&self.config, self.graph, batch)?;
        let p = &self.params;
        let rows = b * t * n;
        let mut h = embed_values(batch, &p.base)?.into_data();
        let mut summed = h.clone();
        let mut tmp = vec![0.0; h.len()];
        for w in &p.gcn {
            matmul_into(&h, rows, w, &mut tmp)?;
            self.graph
                .propagate_into(&tmp, self.config.dim, &mut h, false);
            for (s, v) in summed.iter_mut().zip(h.iter_mut()) {
                *v = v.max(0.0);
                *s += *v;
            }
        }
        let layout = ConvLayout {
            outer: b,
            time: t,
            inner: n,
        };
        let slope = self.config.leaky_slope;
        for k in 0..2 {
            conv_into(
                &summed,
                &p.tcn_kernels[k],
                p.tcn_biases[k].data(),
                layout,
                &mut tmp,
            );
            for (x, c) in summed.iter_mut().zip(&tmp) {
                let r = c + *x;
                *x = if r > 0.0 { r } else { slope * r };
            }
        }
        readout_values(
            &summed,
            (b, t, n, self.config.dim),
            &p.readout_weight,
            &p.readout_bias,
            &mut tmp,
        )
    }
}

/// Describes the first differing entry of two manifests.
pub(crate) fn first_mismatch(want: &Manifest, got: &Manifest) -> String {
    for (i, w) in want.iter().enumerate() {
        match got.get(i) {
            None => return format!("missing parameter `{}` {:?}", w.0, w.1),
            Some(g) if g != w => {
                return format!(
                    "parameter `{}` has shape {:?}, expected `{}` {:?}",
                    g.0, g.1, w.0, w.1
                )
            }
            _ => {}
        }
    }
    match got.get(want.len()) {
        Some(extra) => format!("unexpected parameter `{}` {:?}", extra.0, extra.1),
        None => "manifests match".into(),
    }
}

/// Squared error summed over the horizon and averaged over node rows:
/// `(1/N) Σ_n Σ_h (ŷ − y)²` on `[N × H]`; batches stack windows as extra rows.
pub fn prediction_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (rows, _) = tape.value(pred).dims2()?;
    tape.mse(pred, target, rows as f64)
}

/// Value form of [`prediction_loss`] for `[N × H]` matrices.
pub fn teacher_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "teacher loss")?;
    let (rows, _) = pred.dims2()?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(s / rows as f64)
}
