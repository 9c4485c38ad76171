use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{guarded_stats, TrafficTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where Z-score statistics come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per node, per history window.
    #[default]
    Window,
    /// Per node over the whole training segment.
    Global,
}

/// Chronological split percentages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 60.0,
            val: 20.0,
            test: 20.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub history: usize,
    pub horizon: usize,
    pub split: SplitConfig,
    pub normalization: Normalization,
    pub batch_size: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            history: 12,
            horizon: 12,
            split: SplitConfig::default(),
            normalization: Normalization::Window,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A batch of `(history, target)` windows with their normalization stats.
///
/// Histories are `[B × N × T]`, targets `[B × N × H]`, stats `[B × N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub history: Tensor,
    pub targets: Tensor,
    pub mean: Tensor,
    pub std: Tensor,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.history.shape()[1]
    }

    pub fn history_len(&self) -> usize {
        self.history.shape()[2]
    }

    pub fn horizon(&self) -> usize {
        self.targets.shape()[2]
    }

    /// Standardized histories laid out time-major within each window:
    /// `[B·T·N × 1]`, row `(b, t, n)`.
    pub fn normalized_history(&self) -> Tensor {
        let (b, n, t) = (self.len(), self.num_nodes(), self.history_len());
        let h = self.history.data();
        let (mu, sd) = (self.mean.data(), self.std.data());
        let mut out = vec![0.0; b * t * n];
        for bi in 0..b {
            for ni in 0..n {
                let s = bi * n + ni;
                for ti in 0..t {
                    out[(bi * t + ti) * n + ni] = (h[s * t + ti] - mu[s]) / sd[s];
                }
            }
        }
        Tensor::new([b * t * n, 1], out).expect("history layout")
    }

    /// Targets standardized with the window stats, `[B·N × H]`.
    pub fn normalized_targets(&self) -> Tensor {
        let hz = self.horizon();
        let (mu, sd) = (self.mean.data(), self.std.data());
        let data = self
            .targets
            .data()
            .chunks_exact(hz)
            .enumerate()
            .flat_map(|(s, row)| row.iter().map(move |y| (y - mu[s]) / sd[s]))
            .collect();
        Tensor::new([self.len() * self.num_nodes(), hz], data).expect("target layout")
    }

    /// Raw targets as `[B·N × H]`.
    pub fn raw_targets(&self) -> Tensor {
        self.targets
            .clone()
            .reshape([self.len() * self.num_nodes(), self.horizon()])
            .expect("target layout")
    }

    /// Maps standardized predictions `[B·N × H]` back to volumes.
    pub fn denormalize(&self, pred: &Tensor) -> Result<Tensor> {
        let hz = self.horizon();
        if pred.len() != self.len() * self.num_nodes() * hz {
            return Err(Error::shape(format!(
                "prediction {:?} does not match batch of {} x {} x {hz}",
                pred.shape(),
                self.len(),
                self.num_nodes()
            )));
        }
        let (mu, sd) = (self.mean.data(), self.std.data());
        let data = pred
            .data()
            .chunks_exact(hz)
            .enumerate()
            .flat_map(|(s, row)| row.iter().map(move |p| p * sd[s] + mu[s]))
            .collect();
        Tensor::new([self.len() * self.num_nodes(), hz], data)
    }
}

/// A series split chronologically into train/val/test windows.
#[derive(Clone, Debug)]
pub struct WindowedData {
    traffic: TrafficTensor,
    config: WindowConfig,
    segments: [(usize, usize); 3],
    starts: [Vec<usize>; 3],
    global: Option<(Vec<f64>, Vec<f64>)>,
}

/// Number of stride-1 windows inside a segment.
pub(crate) fn window_count(segment_len: usize, history: usize, horizon: usize) -> usize {
    (segment_len + 1).saturating_sub(history + horizon)
}

/// Splits the series into chronological segments and enumerates the
/// stride-1 windows that fit entirely inside each one.
///
/// Segment lengths are `floor(T_total·p/100)` for train and validation, the
/// remainder for test. Validation or test segments too short for a window
/// yield no windows; an empty training segment is an error.
pub fn make_windows(x: &TrafficTensor, cfg: &WindowConfig) -> Result<WindowedData> {
    let SplitConfig { train, val, test } = cfg.split;
    if [train, val, test].iter().any(|p| *p < 0.0) || ((train + val + test) - 100.0).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "split percentages {train}/{val}/{test} must be non-negative and sum to 100"
        )));
    }
    if cfg.history == 0 || cfg.horizon == 0 || cfg.batch_size == 0 {
        return Err(Error::Data(
            "history, horizon and batch size must be >= 1".into(),
        ));
    }
    let total = x.num_steps();
    let train_len = (total as f64 * train / 100.0).floor() as usize;
    let val_len = (total as f64 * val / 100.0).floor() as usize;
    let test_len = total - train_len - val_len;
    let segments = [
        (0, train_len),
        (train_len, train_len + val_len),
        (train_len + val_len, train_len + val_len + test_len),
    ];
    let need = cfg.history + cfg.horizon;
    if window_count(train_len, cfg.history, cfg.horizon) == 0 {
        let min_total = (need as f64 * 100.0 / train.max(f64::MIN_POSITIVE)).ceil();
        return Err(Error::Data(format!(
            "training split has {train_len} steps but one window needs {need}; \
             the series needs at least {min_total} steps at a {train}% training share"
        )));
    }
    let starts = segments.map(|(a, b)| {
        let count = window_count(b - a, cfg.history, cfg.horizon);
        (a..a + count).collect::<Vec<_>>()
    });
    for (name, (s, seg)) in ["validation", "test"]
        .iter()
        .zip(starts[1..].iter().zip(&segments[1..]))
    {
        if s.is_empty() && seg.1 > seg.0 {
            log::warn!(
                "{name} split has {} steps, too short for one window",
                seg.1 - seg.0
            );
        }
    }
    let global = (cfg.normalization == Normalization::Global).then(|| {
        let (mut m, mut s) = (Vec::new(), Vec::new());
        for n in 0..x.num_nodes() {
            let (mu, sd) = guarded_stats(&x.series(n)[..train_len]);
            m.push(mu);
            s.push(sd);
        }
        (m, s)
    });
    Ok(WindowedData {
        traffic: x.clone(),
        config: cfg.clone(),
        segments,
        starts,
        global,
    })
}

impl WindowedData {
    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn traffic(&self) -> &TrafficTensor {
        &self.traffic
    }

    pub fn num_nodes(&self) -> usize {
        self.traffic.num_nodes()
    }

    /// `[start, end)` time range of a split's segment.
    pub fn segment(&self, split: Split) -> (usize, usize) {
        self.segments[split as usize]
    }

    /// Window start indices of a split, in chronological order.
    pub fn starts(&self, split: Split) -> &[usize] {
        &self.starts[split as usize]
    }

    /// Assembles one batch from explicit window starts.
    pub fn batch(&self, starts: &[usize]) -> Result<WindowBatch> {
        let (n, hist, hz) = (self.num_nodes(), self.config.history, self.config.horizon);
        if starts.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let b = starts.len();
        let mut history = Vec::with_capacity(b * n * hist);
        let mut targets = Vec::with_capacity(b * n * hz);
        let mut mean = Vec::with_capacity(b * n);
        let mut std = Vec::with_capacity(b * n);
        for &s in starts {
            if s + hist + hz > self.traffic.num_steps() {
                return Err(Error::Data(format!(
                    "window at {s} runs past the series end"
                )));
            }
            for node in 0..n {
                let series = self.traffic.series(node);
                let h = &series[s..s + hist];
                history.extend_from_slice(h);
                targets.extend_from_slice(&series[s + hist..s + hist + hz]);
                let (mu, sd) = match &self.global {
                    Some((m, sdv)) => (m[node], sdv[node]),
                    None => guarded_stats(h),
                };
                mean.push(mu);
                std.push(sd);
            }
        }
        Ok(WindowBatch {
            history: Tensor::new([b, n, hist], history)?,
            targets: Tensor::new([b, n, hz], targets)?,
            mean: Tensor::new([b, n], mean)?,
            std: Tensor::new([b, n], std)?,
            starts: starts.to_vec(),
        })
    }

    /// Batches of a split in chronological order, or shuffled when an RNG is
    /// supplied.
    pub fn batches<R: Rng + ?Sized>(
        &self,
        split: Split,
        batch_size: usize,
        shuffle: Option<&mut R>,
    ) -> Result<Vec<WindowBatch>> {
        let mut starts = self.starts(split).to_vec();
        if let Some(rng) = shuffle {
            starts.shuffle(rng);
        }
        starts
            .chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }

    /// Chronological batches at the configured batch size.
    pub fn stream(&self, split: Split) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        self.starts(split)
            .chunks(self.config.batch_size)
            .map(move |c| self.batch(c))
    }
}
