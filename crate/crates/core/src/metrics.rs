//! Per-epoch run metrics, evaluation scores and their JSON output.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Per-party counters for one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PartyEpochStats {
    pub completed: usize,
    pub skipped: usize,
    pub retries: usize,
    /// Seconds blocked on the broker, summed over workers.
    pub wait_seconds: f64,
    /// Seconds of model computation, summed over workers.
    pub busy_seconds: f64,
    /// Worker lifetime in the epoch, summed over workers.
    pub worker_wall_seconds: f64,
}

impl PartyEpochStats {
    pub fn merge(&mut self, other: &PartyEpochStats) {
        self.completed += other.completed;
        self.skipped += other.skipped;
        self.retries += other.retries;
        self.wait_seconds += other.wait_seconds;
        self.busy_seconds += other.busy_seconds;
        self.worker_wall_seconds += other.worker_wall_seconds;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub wall_seconds: f64,
    /// Sample-weighted mean over completed batches; `NaN` if none completed.
    pub mean_train_loss: f64,
    /// AUC for classification, RMSE for regression.
    pub test_metric: f64,
    pub total_wait_seconds: f64,
    pub busy_fraction: f64,
    /// Cumulative bytes published since the start of the run.
    pub bytes_published: u64,
    pub batches_completed: usize,
    pub batches_skipped: usize,
    pub retries: usize,
    pub evictions: u64,
    pub sync_performed: bool,
    pub active: PartyEpochStats,
    pub passive: PartyEpochStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub epochs: usize,
    pub total_seconds: f64,
    pub mean_epoch_seconds: f64,
    pub mean_wait_per_epoch: f64,
    pub mean_busy_fraction: f64,
    pub bytes_published: u64,
    pub final_train_loss: f64,
    pub final_test_metric: f64,
    pub stopped_early: bool,
    /// Seconds until the test AUC first reached `target_auc`.
    pub time_to_target: Option<f64>,
    pub target_auc: f64,
    pub sigma_dp: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub summary: RunSummary,
}

impl RunMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_train_loss).collect()
    }

    pub fn test_metrics(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_metric).collect()
    }

    /// Fills the summary from the recorded epochs.
    pub fn finalize(&mut self, mode: &str, target_auc: f64, classification: bool, stopped_early: bool, sigma_dp: f64) {
        let n = self.epochs.len();
        let total: f64 = self.epochs.iter().map(|e| e.wall_seconds).sum();
        let mut elapsed = 0.0;
        let mut time_to_target = None;
        for e in &self.epochs {
            elapsed += e.wall_seconds;
            if classification && time_to_target.is_none() && e.test_metric >= target_auc {
                time_to_target = Some(elapsed);
            }
        }
        let mean = |f: &dyn Fn(&EpochMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.epochs.iter().map(f).sum::<f64>() / n as f64
            }
        };
        self.summary = RunSummary {
            mode: mode.to_string(),
            epochs: n,
            total_seconds: total,
            mean_epoch_seconds: mean(&|e| e.wall_seconds),
            mean_wait_per_epoch: mean(&|e| e.total_wait_seconds),
            mean_busy_fraction: mean(&|e| e.busy_fraction),
            bytes_published: self.epochs.last().map_or(0, |e| e.bytes_published),
            final_train_loss: self.epochs.last().map_or(f64::NAN, |e| e.mean_train_loss),
            final_test_metric: self.epochs.last().map_or(f64::NAN, |e| e.test_metric),
            stopped_early,
            time_to_target,
            target_auc,
            sigma_dp,
        };
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Area under the ROC curve via the rank-sum statistic; tied scores share
/// their average rank. `NaN` when only one class is present.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", scores.len(), labels.len()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut n_pos = 0usize;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[k]] {
            end += 1;
        }
        // Ranks k+1..=end averaged.
        let avg_rank = (k + 1 + end) as f64 / 2.0;
        for &s in &idx[k..end] {
            if labels[s] == 1.0 {
                rank_sum_pos += avg_rank;
                n_pos += 1;
            } else if labels[s] != 0.0 {
                return Err(Error::config(format!("AUC labels must be 0 or 1, got {}", labels[s])));
            }
        }
        k = end;
    }
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(f64::NAN);
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape("rmse", target.len(), pred.len()));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}
