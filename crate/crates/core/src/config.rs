//! Sectioned TOML run configuration.
//!
//! Every key has a default, unknown keys are rejected, and errors name the
//! offending section and key.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, SplitConfig, SynthConfig, WindowConfig};
use crate::distill::{DistillConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::Propagation;
use crate::optim::OptimizerKind;
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Traffic CSV; synthetic data is generated when absent.
    pub traffic: Option<PathBuf>,
    pub interval_minutes: u32,
    pub history: usize,
    pub horizon: usize,
    pub split: SplitConfig,
    pub normalization: Normalization,
    pub mape_floor: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            traffic: None,
            interval_minutes: crate::data::DEFAULT_INTERVAL_MINUTES,
            history: 12,
            horizon: 12,
            split: SplitConfig::default(),
            normalization: Normalization::Window,
            mape_floor: crate::eval::DEFAULT_MAPE_FLOOR,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Adjacency CSV; required with a traffic CSV.
    pub adjacency: Option<PathBuf>,
    pub self_loops: bool,
    pub propagation: Propagation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub layers: usize,
    pub dim: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let m = TeacherConfig::default();
        let t = TrainConfig::default();
        Self {
            layers: m.layers,
            dim: m.dim,
            kernel: m.kernel,
            dropout: m.dropout,
            leaky_slope: m.leaky_slope,
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            seed: t.seed,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub layers: usize,
    /// Must equal the teacher's `dim`; taken from it when absent.
    pub dim: Option<usize>,
    pub conv_kernel: usize,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            layers: 3,
            dim: None,
            conv_kernel: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmup: usize,
    pub repeats: usize,
    pub batch_size: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            warmup: 1,
            repeats: 5,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root under which run directories are created.
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub graph: GraphSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub distill: DistillConfig,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            history: self.data.history,
            horizon: self.data.horizon,
            split: self.data.split,
            normalization: self.data.normalization,
            batch_size: self.distill.batch_size,
        }
    }

    pub fn teacher_model(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            layers: t.layers,
            dim: t.dim,
            kernel: t.kernel,
            dropout: t.dropout,
            leaky_slope: t.leaky_slope,
            history: self.data.history,
            horizon: self.data.horizon,
        }
    }

    pub fn teacher_schedule(&self) -> TrainConfig {
        let t = &self.teacher;
        TrainConfig {
            lr: t.lr,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patience: t.patience,
            seed: t.seed,
            optimizer: t.optimizer,
        }
    }

    pub fn student_model(&self) -> StudentConfig {
        StudentConfig {
            layers: self.student.layers,
            dim: self.student.dim.unwrap_or(self.teacher.dim),
            history: self.data.history,
            horizon: self.data.horizon,
            conv_kernel: self.student.conv_kernel,
        }
    }

    /// Sets every seed (data generation, teacher, distillation) at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.teacher.seed = seed;
        self.distill.seed = seed;
    }

    /// Cross-section checks.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |section: &str, key: &str, msg: String| Error::Config {
            section: section.into(),
            key: key.into(),
            msg,
        };
        if let Some(d) = self.student.dim {
            if d != self.teacher.dim {
                return Err(cfg_err(
                    "student",
                    "dim",
                    format!(
                        "{d} differs from teacher dim {}; embeddings must align",
                        self.teacher.dim
                    ),
                ));
            }
        }
        if self.data.traffic.is_some() && self.graph.adjacency.is_none() {
            return Err(cfg_err(
                "graph",
                "adjacency",
                "required when data.traffic is set".into(),
            ));
        }
        if self.bench.warmup == 0 || self.bench.repeats == 0 || self.bench.batch_size == 0 {
            return Err(cfg_err(
                "bench",
                "warmup",
                "warmup, repeats and batch_size must be >= 1".into(),
            ));
        }
        self.teacher_model()
            .validate()
            .map_err(|e| cfg_err("teacher", "kernel", e.to_string()))?;
        self.teacher_schedule()
            .validate()
            .map_err(|e| cfg_err("teacher", "lr", e.to_string()))?;
        self.student_model()
            .validate()
            .map_err(|e| cfg_err("student", "layers", e.to_string()))?;
        self.distill
            .validate()
            .map_err(|e| cfg_err("distill", "", e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            section: String::new(),
            key: String::new(),
            msg: e.to_string(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            section: String::new(),
            key: String::new(),
            msg: e.to_string(),
        })?;
        let mut cfg = RunConfig::default();
        for (key, value) in table {
            match key.as_str() {
                "data" => cfg.data = section(&key, value, &cfg.data)?,
                "synth" => cfg.synth = section(&key, value, &cfg.synth)?,
                "graph" => cfg.graph = section(&key, value, &cfg.graph)?,
                "teacher" => cfg.teacher = section(&key, value, &cfg.teacher)?,
                "student" => cfg.student = section(&key, value, &cfg.student)?,
                "distill" => cfg.distill = section(&key, value, &cfg.distill)?,
                "bench" => cfg.bench = section(&key, value, &cfg.bench)?,
                "output_dir" => {
                    let s = value.as_str().ok_or_else(|| Error::Config {
                        section: String::new(),
                        key: key.clone(),
                        msg: "expected a path string".into(),
                    })?;
                    cfg.output_dir = Some(PathBuf::from(s));
                }
                _ => {
                    let (section, k) = if value.is_table() {
                        (key.as_str(), "")
                    } else {
                        ("", key.as_str())
                    };
                    return Err(Error::Config {
                        section: section.into(),
                        key: k.into(),
                        msg: "unknown key".into(),
                    });
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Applies one section's keys over `defaults`, one key at a time, so an
/// error can name the key that caused it.
fn section<T: Serialize + DeserializeOwned>(
    name: &str,
    value: toml::Value,
    defaults: &T,
) -> Result<T> {
    let err = |key: &str, msg: String| Error::Config {
        section: name.into(),
        key: key.into(),
        msg,
    };
    let toml::Value::Table(table) = value else {
        return Err(err("", "expected a table".into()));
    };
    let mut current = serde_json::to_value(defaults)?;
    for (key, v) in table {
        let obj = current
            .as_object_mut()
            .expect("sections serialize as objects");
        if !obj.contains_key(&key) {
            return Err(err(&key, "unknown key".into()));
        }
        let mut next = current.clone();
        let jv = serde_json::to_value(&v).map_err(|e| err(&key, e.to_string()))?;
        next.as_object_mut().unwrap().insert(key.clone(), jv);
        serde_json::from_value::<T>(next.clone()).map_err(|e| err(&key, e.to_string()))?;
        current = next;
    }
    Ok(serde_json::from_value(current)?)
}
