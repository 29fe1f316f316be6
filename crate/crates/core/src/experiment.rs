//! Everything needed to reproduce a run from one key=value file: the data
//! source, the vertical split, training settings and profiling environment.

use std::path::PathBuf;

use crate::data::{generate_synthetic, load_csv, prepare, PreparedData, RawDataset, Task};
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::profiler::{ProfileEnv, DEFAULT_SWEEP};
use crate::runtime::{Mode, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        n_informative: usize,
        task: Task,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        task: Task,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub source: DataSource,
    /// Feature columns held by the active party.
    pub d_active: usize,
    pub train_fraction: f64,
    pub data_seed: u64,
    pub train: TrainConfig,
    /// Modes run by a comparison.
    pub modes: Vec<Mode>,
    pub calibration_batches: Vec<usize>,
    pub calibration_reps: usize,
    pub env: ProfileEnv,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                n: 10_000,
                d: 50,
                n_informative: 10,
                task: Task::Classification,
            },
            d_active: 25,
            train_fraction: 0.7,
            data_seed: 0,
            train: TrainConfig::default(),
            modes: Mode::ALL.to_vec(),
            calibration_batches: DEFAULT_SWEEP.to_vec(),
            calibration_reps: 5,
            env: ProfileEnv::default(),
        }
    }
}

fn parse_task(s: &str) -> Result<Task> {
    match s.trim().to_ascii_lowercase().as_str() {
        "classification" => Ok(Task::Classification),
        "regression" => Ok(Task::Regression),
        other => Err(Error::config(format!("unknown task '{other}'"))),
    }
}

fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse().map_err(|_| Error::config(format!("invalid number '{x}'"))))
        .collect()
}

impl ExperimentSpec {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut spec = Self::default();
        let task = kv.get_str("task").map(parse_task).transpose()?.unwrap_or(Task::Classification);
        spec.source = match kv.get_str("data").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                n: kv.get("n")?.unwrap_or(10_000),
                d: kv.get("d")?.unwrap_or(50),
                n_informative: kv.get("n_informative")?.unwrap_or(10),
                task,
            },
            "csv" => DataSource::Csv {
                path: kv.require::<String>("csv_path")?.into(),
                label_column: kv.get("label_column")?.unwrap_or_else(|| "label".to_string()),
                task,
            },
            other => return Err(Error::config(format!("unknown data source '{other}'"))),
        };
        if let Some(v) = kv.get("d_active")? {
            spec.d_active = v;
        }
        if let Some(v) = kv.get("train_fraction")? {
            spec.train_fraction = v;
        }
        if let Some(v) = kv.get("data_seed")? {
            spec.data_seed = v;
        }
        if let Some(s) = kv.get_str("modes") {
            spec.modes = s.split(',').map(str::parse).collect::<Result<_>>()?;
        }
        if let Some(s) = kv.get_str("calibration_batches") {
            spec.calibration_batches = parse_usizes(s)?;
        }
        if let Some(v) = kv.get("calibration_reps")? {
            spec.calibration_reps = v;
        }
        if let Some(v) = kv.get("cores_a")? {
            spec.env.cores_a = v;
        }
        if let Some(v) = kv.get("cores_p")? {
            spec.env.cores_p = v;
        }
        if let Some(v) = kv.get("bandwidth")? {
            spec.env.bandwidth = v;
        }
        if let Some(v) = kv.get("mem_bar_a")? {
            spec.env.mem_bar_a = v;
        }
        if let Some(v) = kv.get("mem_bar_p")? {
            spec.env.mem_bar_p = v;
        }
        spec.train.apply_kv(kv)?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::config("at least one mode is required"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must be in (0, 1)"));
        }
        self.train.validate()
    }

    pub fn load_raw(&self) -> Result<RawDataset> {
        match &self.source {
            DataSource::Synthetic {
                n,
                d,
                n_informative,
                task,
            } => generate_synthetic(*n, *d, *n_informative, *task, self.data_seed),
            DataSource::Csv {
                path,
                label_column,
                task,
            } => load_csv(path, label_column, *task),
        }
    }

    pub fn load(&self) -> Result<PreparedData> {
        prepare(&self.load_raw()?, self.d_active, self.train_fraction, self.data_seed)
    }
}
