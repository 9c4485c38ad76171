//! Accuracy metrics, latency benchmarks, and embedding diagnostics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Split, WindowBatch, WindowedData};
use crate::error::{Error, Result};
use crate::model::Forecaster;
use crate::tensor::Tensor;

/// Targets with `|y|` below this are left out of MAPE.
pub const DEFAULT_MAPE_FLOOR: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based horizon step.
    pub step: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is masked.
    pub mape: Option<f64>,
    pub per_horizon: Vec<HorizonMetrics>,
    /// Number of scored entries.
    pub count: usize,
}

#[derive(Default)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_pct: usize,
}

impl Acc {
    fn add(&mut self, p: f64, y: f64, floor: f64) {
        let e = p - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() >= floor {
            self.pct += (e / y).abs();
            self.n_pct += 1;
        }
    }

    fn finish(&self) -> (f64, f64, Option<f64>) {
        let n = self.n as f64;
        let mape = (self.n_pct > 0).then(|| 100.0 * self.pct / self.n_pct as f64);
        (self.abs / n, (self.sq / n).sqrt(), mape)
    }
}

/// MAE, RMSE and masked MAPE of `[rows × H]` predictions.
pub fn compute_metrics(pred: &Tensor, target: &Tensor, mape_floor: f64) -> Result<MetricsReport> {
    pred.expect_same_shape(target, "metrics")?;
    if mape_floor.is_nan() || mape_floor < 0.0 {
        return Err(Error::Contract(format!(
            "MAPE floor {mape_floor} must be >= 0"
        )));
    }
    let (rows, h) = pred.dims2()?;
    let mut all = Acc::default();
    let mut steps: Vec<Acc> = (0..h).map(|_| Acc::default()).collect();
    for r in 0..rows {
        for (k, acc) in steps.iter_mut().enumerate() {
            let (p, y) = (pred.data()[r * h + k], target.data()[r * h + k]);
            all.add(p, y, mape_floor);
            acc.add(p, y, mape_floor);
        }
    }
    let (mae, rmse, mape) = all.finish();
    let per_horizon = steps
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let (mae, rmse, mape) = a.finish();
            HorizonMetrics {
                step: k + 1,
                mae,
                rmse,
                mape,
            }
        })
        .collect();
    Ok(MetricsReport {
        mae,
        rmse,
        mape,
        per_horizon,
        count: rows * h,
    })
}

/// Stacked de-normalized predictions and raw targets over a split.
pub fn predict_split<F: Forecaster + ?Sized>(
    model: &F,
    data: &WindowedData,
    split: Split,
) -> Result<(Tensor, Tensor)> {
    if data.starts(split).is_empty() {
        return Err(Error::Data(format!("the {split:?} split has no windows")));
    }
    let h = data.config().horizon;
    let (mut p, mut y) = (Vec::new(), Vec::new());
    for batch in data.stream(split) {
        let batch = batch?;
        p.extend(model.predict(&batch)?.into_data());
        y.extend(batch.raw_targets().into_data());
    }
    let rows = p.len() / h;
    Ok((Tensor::new([rows, h], p)?, Tensor::new([rows, h], y)?))
}

pub fn evaluate<F: Forecaster + ?Sized>(
    model: &F,
    data: &WindowedData,
    split: Split,
    mape_floor: f64,
) -> Result<MetricsReport> {
    let (p, y) = predict_split(model, data, split)?;
    compute_metrics(&p, &y, mape_floor)
}

pub fn mean_absolute_error<F: Forecaster + ?Sized>(
    model: &F,
    data: &WindowedData,
    split: Split,
) -> Result<f64> {
    let (p, y) = predict_split(model, data, split)?;
    Ok(p.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / p.len() as f64)
}

/// Historical average: each node's mean over the training segment at the
/// same position in the cycle (or over the whole segment with no period).
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    period: Option<usize>,
    /// `[node][phase]`.
    table: Vec<Vec<f64>>,
}

impl HistoricalAverage {
    pub fn fit(data: &WindowedData, period: Option<usize>) -> Result<Self> {
        let (a, b) = data.segment(Split::Train);
        let p = period.unwrap_or(1).max(1);
        if b - a < p {
            return Err(Error::Data(format!(
                "training segment of {} steps is shorter than the period {p}",
                b - a
            )));
        }
        let table = (0..data.num_nodes())
            .map(|n| {
                let s = &data.traffic().series(n)[a..b];
                let mut sum = vec![0.0; p];
                let mut cnt = vec![0usize; p];
                for (t, v) in s.iter().enumerate() {
                    sum[(a + t) % p] += v;
                    cnt[(a + t) % p] += 1;
                }
                sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect()
            })
            .collect();
        Ok(Self { period, table })
    }

    pub fn predict(&self, batch: &WindowBatch) -> Tensor {
        let (n, t, h) = (batch.num_nodes(), batch.history_len(), batch.horizon());
        let p = self.period.unwrap_or(1).max(1);
        let mut out = Vec::with_capacity(batch.len() * n * h);
        for &s in &batch.starts {
            for row in &self.table {
                out.extend((0..h).map(|k| row[(s + t + k) % p]));
            }
        }
        Tensor::new([batch.len() * n, h], out).expect("shape by construction")
    }

    pub fn evaluate(
        &self,
        data: &WindowedData,
        split: Split,
        mape_floor: f64,
    ) -> Result<MetricsReport> {
        let (mut p, mut y) = (Vec::new(), Vec::new());
        for batch in data.stream(split) {
            let batch = batch?;
            p.extend(self.predict(&batch).into_data());
            y.extend(batch.raw_targets().into_data());
        }
        let h = data.config().horizon;
        if p.is_empty() {
            return Err(Error::Data(format!("the {split:?} split has no windows")));
        }
        let rows = p.len() / h;
        compute_metrics(
            &Tensor::new([rows, h], p)?,
            &Tensor::new([rows, h], y)?,
            mape_floor,
        )
    }
}

/// Where a benchmark ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cores: usize,
    pub threads_used: usize,
    pub precision: String,
    pub os: String,
    pub arch: String,
    pub profile: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads_used: 1,
            precision: "f64".into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            profile: if cfg!(debug_assertions) {
                "debug"
            } else {
                "release"
            }
            .into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub batches: usize,
    pub windows: usize,
    pub warmup: usize,
    /// Wall-clock of every timed repeat, seconds.
    pub repeat_secs: Vec<f64>,
    /// Median over repeats of the total time for all batches.
    pub total_secs: f64,
    pub per_window_secs: f64,
    /// `reference / self`; set by [`LatencyReport::compare_to`].
    pub speedup: Option<f64>,
    pub reference: Option<String>,
    pub environment: Environment,
}

impl LatencyReport {
    /// Records the speedup of this model over `reference`.
    pub fn compare_to(&mut self, reference: &LatencyReport) {
        self.speedup = Some(reference.total_secs / self.total_secs);
        self.reference = Some(reference.model.clone());
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Times the forward pass over pre-built batches on the current thread.
/// Each repeat runs every batch once; the first `warmup` full passes are
/// discarded. Normalized outputs are checked to be identical across repeats.
pub fn bench_inference<F: Forecaster + ?Sized>(
    model: &F,
    batches: &[WindowBatch],
    warmup: usize,
    repeats: usize,
) -> Result<LatencyReport> {
    if batches.is_empty() {
        return Err(Error::Data("nothing to benchmark: no batches".into()));
    }
    if warmup == 0 || repeats == 0 {
        return Err(Error::Contract("warmup and repeats must be >= 1".into()));
    }
    let mut reference: Option<Vec<Tensor>> = None;
    let mut times = Vec::with_capacity(repeats);
    for r in 0..warmup + repeats {
        let mut outs = Vec::with_capacity(batches.len());
        let started = Instant::now();
        for b in batches {
            outs.push(model.predict_normalized(b)?);
        }
        let secs = started.elapsed().as_secs_f64();
        match &reference {
            None => reference = Some(outs),
            Some(prev) => {
                if prev != &outs {
                    return Err(Error::Contract(format!(
                        "{} produced different outputs across repeats",
                        model.tag()
                    )));
                }
            }
        }
        if r >= warmup {
            times.push(secs);
        }
    }
    let windows: usize = batches.iter().map(|b| b.len()).sum();
    let total = median(&times);
    Ok(LatencyReport {
        model: model.tag().to_string(),
        batches: batches.len(),
        windows,
        warmup,
        repeat_secs: times,
        total_secs: total,
        per_window_secs: total / windows as f64,
        speedup: None,
        reference: None,
        environment: Environment::current(),
    })
}

/// Mean pairwise cosine similarity of node rows, per layer.
///
/// Each layer is `[rows × d]`; rows are split into consecutive blocks of
/// `num_nodes` and the per-block means are averaged.
pub fn oversmoothing_score(layers: &[Tensor], num_nodes: usize) -> Result<Vec<f64>> {
    if num_nodes < 2 {
        return Err(Error::Contract(
            "over-smoothing needs at least 2 nodes".into(),
        ));
    }
    layers
        .iter()
        .map(|x| {
            let (rows, d) = x.dims2()?;
            if rows % num_nodes != 0 {
                return Err(Error::shape(format!(
                    "{rows} rows do not split into blocks of {num_nodes}"
                )));
            }
            let blocks = rows / num_nodes;
            let mut total = 0.0;
            for b in 0..blocks {
                let block = &x.data()[b * num_nodes * d..(b + 1) * num_nodes * d];
                let norms: Vec<f64> = block
                    .chunks(d)
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let mut s = 0.0;
                for i in 0..num_nodes {
                    for j in i + 1..num_nodes {
                        if norms[i] > crate::autodiff::COSINE_EPS
                            && norms[j] > crate::autodiff::COSINE_EPS
                        {
                            let dot: f64 = block[i * d..(i + 1) * d]
                                .iter()
                                .zip(&block[j * d..(j + 1) * d])
                                .map(|(a, b)| a * b)
                                .sum();
                            s += dot / (norms[i] * norms[j]);
                        }
                    }
                }
                total += s / (num_nodes * (num_nodes - 1) / 2) as f64;
            }
            Ok(total / blocks as f64)
        })
        .collect()
}

/// Everything one run reports, serialized as a single JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub teacher_metrics: Option<MetricsReport>,
    pub student_metrics: Option<MetricsReport>,
    pub baseline_metrics: Option<MetricsReport>,
    pub teacher_latency: Option<LatencyReport>,
    pub student_latency: Option<LatencyReport>,
    /// Mean pairwise cosine of the teacher's per-layer spatial embeddings.
    pub oversmoothing: Vec<f64>,
    /// Diagnostic alignment weights `(slot, n, j, ω)`.
    pub kl_weights: Vec<(usize, usize, usize, f64)>,
}

impl DistillReport {
    /// Plain-text table with MAE, RMSE, MAPE, inference time and speedup.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>10} {:>9} {:>14} {:>9}\n",
            "model", "MAE", "RMSE", "MAPE%", "Inference(s)", "Faster x"
        );
        let rows = [
            ("teacher", &self.teacher_metrics, &self.teacher_latency),
            ("student", &self.student_metrics, &self.student_latency),
        ];
        for (name, m, l) in rows {
            if m.is_none() && l.is_none() {
                continue;
            }
            let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
            out.push_str(&format!(
                "{:<10} {:>10} {:>10} {:>9} {:>14} {:>9}\n",
                name,
                f(m.as_ref().map(|m| m.mae), 4),
                f(m.as_ref().map(|m| m.rmse), 4),
                f(m.as_ref().and_then(|m| m.mape), 2),
                f(l.as_ref().map(|l| l.total_secs), 5),
                f(l.as_ref().map(|l| l.speedup.unwrap_or(1.0)), 2),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let y = Tensor::new([1, 2], vec![10.0, 20.0]).unwrap();
        let p = Tensor::new([1, 2], vec![12.0, 16.0]).unwrap();
        let m = compute_metrics(&p, &y, 1.0).unwrap();
        assert!((m.mae - 3.0).abs() < 1e-12);
        assert!((m.rmse - 10f64.sqrt()).abs() < 1e-12);
        assert!((m.mape.unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(m.count, 2);
        assert_eq!(m.per_horizon[1].mae, 4.0);
        let z = compute_metrics(&y, &y, 1.0).unwrap();
        assert_eq!((z.mae, z.rmse, z.mape), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn all_masked_mape_is_undefined() {
        let y = Tensor::zeros([2, 2]);
        let p = Tensor::full([2, 2], 1.0);
        let m = compute_metrics(&p, &y, 1.0).unwrap();
        assert_eq!(m.mape, None);
        assert_eq!(m.mae, 1.0);
    }

    #[test]
    fn smoothing_extremes() {
        let same = Tensor::new([3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let eye = Tensor::identity(3);
        let s = oversmoothing_score(&[same, eye], 3).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        let zero_row = Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(oversmoothing_score(&[zero_row], 2).unwrap(), vec![0.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn table_lists_models() {
        let m = compute_metrics(&Tensor::zeros([1, 1]), &Tensor::full([1, 1], 2.0), 1.0).unwrap();
        let r = DistillReport {
            student_metrics: Some(m),
            ..Default::default()
        };
        let t = r.summary_table();
        assert!(t.contains("student") && !t.contains("teacher"));
        assert!(t.contains("Faster x"));
    }
}
