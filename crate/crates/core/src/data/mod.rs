//! Traffic observations, Z-score embedding, windowing and synthetic data.

mod io;
mod synth;
mod window;

pub use io::{load_traffic_csv, write_traffic_csv};
pub use synth::{synth_generate, SynthConfig};
pub use window::{
    make_windows, Normalization, Split, SplitConfig, WindowBatch, WindowConfig, WindowedData,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default sampling interval of PeMS-style data.
pub const DEFAULT_INTERVAL_MINUTES: u32 = 5;

/// Windows whose standard deviation falls below this use `σ = 1`.
pub const SIGMA_GUARD: f64 = 1e-8;

/// Volume observations, `values[n][t]` for `N` sensors over `T_total` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficTensor {
    values: Tensor,
    interval_minutes: u32,
    sensor_ids: Vec<String>,
}

impl TrafficTensor {
    /// `values` is `[N × T_total]`. Values must be finite and non-negative.
    pub fn new(
        values: Tensor,
        interval_minutes: u32,
        sensor_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, _) = values.dims2()?;
        if let Some(i) = values
            .data()
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0)
        {
            let t_total = values.shape()[1];
            return Err(Error::Data(format!(
                "value {} at sensor {}, step {} is negative or non-finite",
                values.data()[i],
                i / t_total,
                i % t_total
            )));
        }
        let sensor_ids = sensor_ids.unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
        if sensor_ids.len() != n {
            return Err(Error::shape(format!(
                "{} sensor ids for {n} sensors",
                sensor_ids.len()
            )));
        }
        Ok(Self {
            values,
            interval_minutes,
            sensor_ids,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    /// Series of one sensor.
    pub fn series(&self, n: usize) -> &[f64] {
        let t = self.num_steps();
        &self.values.data()[n * t..(n + 1) * t]
    }

    pub fn value(&self, n: usize, t: usize) -> f64 {
        self.values.data()[n * self.num_steps() + t]
    }
}

/// Mean and guarded population standard deviation of a slice.
pub fn guarded_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < SIGMA_GUARD { 1.0 } else { std })
}

/// Per-node window statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-score embedding of an `[N × T]` window onto a base vector of length `d`.
///
/// Each value is standardized with its node's window mean and population
/// standard deviation, then scales `base`. Output is `[N × T × d]`.
pub fn zscore_embed(window: &Tensor, base: &Tensor) -> Result<(Tensor, NodeStats)> {
    let (n, t) = window.dims2()?;
    if base.rank() != 1 {
        return Err(Error::shape(format!(
            "base embedding must be a vector, got {:?}",
            base.shape()
        )));
    }
    if !window.all_finite() {
        return Err(Error::Data("window contains non-finite values".into()));
    }
    let d = base.len();
    let mut out = Vec::with_capacity(n * t * d);
    let mut stats = NodeStats {
        mean: Vec::with_capacity(n),
        std: Vec::with_capacity(n),
    };
    for row in window.data().chunks_exact(t) {
        let (mu, sigma) = guarded_stats(row);
        stats.mean.push(mu);
        stats.std.push(sigma);
        for &x in row {
            let z = (x - mu) / sigma;
            out.extend(base.data().iter().map(|e| z * e));
        }
    }
    Ok((Tensor::new([n, t, d], out)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_window_embeds_to_zero() {
        let w = Tensor::full([2, 12], 42.0);
        let (e, stats) = zscore_embed(&w, &Tensor::from_vec(vec![1.0, -3.0])).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.mean, vec![42.0, 42.0]);
        assert_eq!(stats.std, vec![1.0, 1.0]);
    }

    #[test]
    fn two_point_window() {
        let w = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let (e, stats) = zscore_embed(&w, &Tensor::from_vec(vec![1.0])).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(e.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zero_base_gives_zero() {
        let mut rng = rand::rng();
        let w = Tensor::uniform([3, 12], 0.0, 100.0, &mut rng);
        let (e, _) = zscore_embed(&w, &Tensor::zeros([4])).unwrap();
        assert_eq!(e.shape(), &[3, 12, 4]);
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restandardizing_is_a_fixed_point() {
        let mut rng = rand::rng();
        let w = Tensor::uniform([4, 12], 0.0, 500.0, &mut rng);
        let base = Tensor::from_vec(vec![1.0]);
        let (once, _) = zscore_embed(&w, &base).unwrap();
        let once = once.reshape([4, 12]).unwrap();
        let (twice, stats) = zscore_embed(&once, &base).unwrap();
        assert!(twice.reshape([4, 12]).unwrap().max_abs_diff(&once) < 1e-12);
        assert!(stats.mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn traffic_tensor_rejects_negative() {
        let v = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert!(TrafficTensor::new(v, 5, None).is_err());
    }
}
