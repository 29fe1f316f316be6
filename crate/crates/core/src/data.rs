//! Dataset generation, CSV ingestion, vertical partitioning and batch plans.
//!
//! Rows are assumed to be aligned between the parties already: row `i` of the
//! active party's features and row `i` of the passive party's features belong
//! to the same sample.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Classification,
    Regression,
}

/// A labelled table before it is divided between parties.
#[derive(Clone, Debug)]
pub struct RawDataset {
    pub features: DenseMatrix,
    pub labels: DenseMatrix,
    pub task: Task,
    pub feature_names: Vec<String>,
    pub label_name: String,
}

impl RawDataset {
    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    /// Seeded row split into `(train, test)`; `train_fraction` of the rows
    /// (rounded) go to train.
    pub fn train_test_split(&self, train_fraction: f64, seed: u64) -> Result<(RawDataset, RawDataset)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::config(format!("train fraction must be in (0,1), got {train_fraction}")));
        }
        let n = self.n();
        let n_train = ((n as f64) * train_fraction).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::config(format!("{n} rows cannot be split {train_fraction}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (tr, te) = idx.split_at(n_train);
        let take = |rows: &[usize]| RawDataset {
            features: self.features.select_rows(rows),
            labels: self.labels.select_rows(rows),
            task: self.task,
            feature_names: self.feature_names.clone(),
            label_name: self.label_name.clone(),
        };
        Ok((take(tr), take(te)))
    }
}

/// Features of the same samples held by the two parties.
#[derive(Clone, Debug)]
pub struct VerticalDataset {
    pub active_features: DenseMatrix,
    pub passive_features: DenseMatrix,
    /// Held by the active party only.
    pub labels: DenseMatrix,
    pub task: Task,
    pub active_columns: Vec<usize>,
    pub passive_columns: Vec<usize>,
}

impl VerticalDataset {
    pub fn n(&self) -> usize {
        self.labels.rows()
    }

    pub fn d_active(&self) -> usize {
        self.active_features.cols()
    }

    pub fn d_passive(&self) -> usize {
        self.passive_features.cols()
    }
}

/// Which original columns each party receives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnSplit {
    pub active: Vec<usize>,
    pub passive: Vec<usize>,
}

impl ColumnSplit {
    /// Seeded permutation of `0..d`; the first `d_active` go to the active
    /// party. Each side keeps its columns in ascending order.
    pub fn random(d: usize, d_active: usize, seed: u64) -> Result<Self> {
        if d < 2 || d_active == 0 || d_active >= d {
            return Err(Error::config(format!(
                "active feature count must be in 1..={} for {d} features, got {d_active}",
                d.saturating_sub(1)
            )));
        }
        let mut cols: Vec<usize> = (0..d).collect();
        cols.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, p) = cols.split_at(d_active);
        let (mut active, mut passive) = (a.to_vec(), p.to_vec());
        active.sort_unstable();
        passive.sort_unstable();
        Ok(Self { active, passive })
    }

    pub fn apply(&self, features: &DenseMatrix, labels: &DenseMatrix, task: Task) -> Result<VerticalDataset> {
        if features.rows() != labels.rows() {
            return Err(Error::shape("vertical_split", features.rows(), labels.rows()));
        }
        let d = self.active.len() + self.passive.len();
        if features.cols() != d {
            return Err(Error::shape("vertical_split", d, features.cols()));
        }
        Ok(VerticalDataset {
            active_features: features.select_cols(&self.active),
            passive_features: features.select_cols(&self.passive),
            labels: labels.clone(),
            task,
            active_columns: self.active.clone(),
            passive_columns: self.passive.clone(),
        })
    }
}

pub fn vertical_split(
    features: &DenseMatrix,
    labels: &DenseMatrix,
    d_active: usize,
    task: Task,
    seed: u64,
) -> Result<VerticalDataset> {
    ColumnSplit::random(features.cols(), d_active, seed)?.apply(features, labels, task)
}

/// Per-column z-scoring fitted on one table and applied to others.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseMatrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mut mean = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // Constant columns are left centred but unscaled.
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = x.clone();
        let cols = x.cols();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let c = i % cols;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// Train and test halves, each already divided between the parties.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: VerticalDataset,
    pub test: VerticalDataset,
}

/// Row split first (train/test), then column split, then party-local
/// standardisation with statistics from the training rows.
pub fn prepare(raw: &RawDataset, d_active: usize, train_fraction: f64, seed: u64) -> Result<PreparedData> {
    let (train, test) = raw.train_test_split(train_fraction, seed)?;
    let split = ColumnSplit::random(raw.d(), d_active, seed.wrapping_add(1))?;
    let mut tr = split.apply(&train.features, &train.labels, raw.task)?;
    let mut te = split.apply(&test.features, &test.labels, raw.task)?;
    let sa = Standardizer::fit(&tr.active_features);
    let sp = Standardizer::fit(&tr.passive_features);
    tr.active_features = sa.apply(&tr.active_features);
    te.active_features = sa.apply(&te.active_features);
    tr.passive_features = sp.apply(&tr.passive_features);
    te.passive_features = sp.apply(&te.passive_features);
    Ok(PreparedData { train: tr, test: te })
}

/// Synthetic table in the spirit of scikit-learn's generators: Gaussian
/// clusters on hypercube vertices for classification (two clusters per class,
/// exactly balanced labels), and a sparse linear target plus noise for
/// regression. Only the first `n_informative` columns carry signal before
/// the rows and columns are shuffled.
pub fn generate_synthetic(n: usize, d: usize, n_informative: usize, task: Task, seed: u64) -> Result<RawDataset> {
    if n == 0 || d == 0 {
        return Err(Error::config("synthetic dataset needs n >= 1 and d >= 1"));
    }
    if n_informative == 0 || n_informative > d {
        return Err(Error::config(format!(
            "informative feature count must be in 1..={d}, got {n_informative}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DenseMatrix::zeros(n, d);
    let mut y = vec![0.0; n];
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    match task {
        Task::Classification => {
            const CLUSTERS_PER_CLASS: usize = 2;
            const CLASS_SEP: f64 = 1.0;
            let mut vertex_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let centroids: Vec<Vec<f64>> = (0..2 * CLUSTERS_PER_CLASS)
                .map(|_| {
                    (0..n_informative)
                        .map(|_| if vertex_rng.random_bool(0.5) { CLASS_SEP } else { -CLASS_SEP })
                        .collect()
                })
                .collect();
            for i in 0..n {
                let label = i % 2;
                let cluster = label * CLUSTERS_PER_CLASS + (i / 2) % CLUSTERS_PER_CLASS;
                for j in 0..d {
                    let noise = gauss();
                    let v = if j < n_informative { centroids[cluster][j] + noise } else { noise };
                    x.set(i, j, v);
                }
                y[i] = label as f64;
            }
        }
        Task::Regression => {
            let coef: Vec<f64> = (0..n_informative).map(|_| gauss()).collect();
            for (i, yi) in y.iter_mut().enumerate() {
                let mut target = 0.0;
                for j in 0..d {
                    let v = gauss();
                    x.set(i, j, v);
                    if j < n_informative {
                        target += coef[j] * v;
                    }
                }
                *yi = target + 0.1 * gauss();
            }
        }
    }

    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let mut cols: Vec<usize> = (0..d).collect();
    cols.shuffle(&mut rng);
    let features = x.select_rows(&rows).select_cols(&cols);
    let labels = DenseMatrix::column(rows.iter().map(|&r| y[r]).collect());
    Ok(RawDataset {
        features,
        labels,
        task,
        feature_names: (0..d).map(|j| format!("x{j}")).collect(),
        label_name: "y".into(),
    })
}

/// Reads a headed CSV of numeric cells. Every column except `label_column`
/// becomes a feature, in file order. Parse errors report the 1-based data
/// row (header excluded) and 1-based column.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str, task: Task) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::config(format!("label column '{label_column}' not found in {}", path.display())))?;
    if headers.len() < 2 {
        return Err(Error::config("csv needs a label column and at least one feature column"));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: r + 1,
                column: record.len().min(headers.len()) + 1,
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: c + 1,
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: c + 1,
                    message: format!("'{cell}' is not finite"),
                });
            }
            if c == label_idx {
                labels.push(v);
            } else {
                data.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::config(format!("{} has no data rows", path.display())));
    }
    let d = headers.len() - 1;
    let mut feature_names = headers.clone();
    let label_name = feature_names.remove(label_idx);
    Ok(RawDataset {
        features: DenseMatrix::from_vec(n, d, data)?,
        labels: DenseMatrix::column(labels),
        task,
        feature_names,
        label_name,
    })
}

/// Writes features then the label as the last column.
pub fn write_csv(path: impl AsRef<Path>, raw: &RawDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = raw.feature_names.clone();
    header.push(raw.label_name.clone());
    w.write_record(&header)?;
    for r in 0..raw.n() {
        let mut rec: Vec<String> = raw.features.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(raw.labels.get(r, 0).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_id: usize,
    /// Positions in [`BatchPlan::order`].
    pub range: Range<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Assignment of samples to `⌈n/B⌉` batch ids. Both parties derive the same
/// plan from the same seed.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
    pub batches: Vec<Batch>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Sample indices of a batch.
    pub fn indices(&self, batch_id: usize) -> &[usize] {
        &self.order[self.batches[batch_id].range.clone()]
    }
}

pub fn num_batches(n: usize, batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    Ok(n.div_ceil(batch_size))
}

pub fn make_batch_plan(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::config(format!("batch size must be in 1..={n}, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let batches = (0..num_batches(n, batch_size)?)
        .map(|b| Batch {
            batch_id: b,
            range: b * batch_size..((b + 1) * batch_size).min(n),
        })
        .collect();
    Ok(BatchPlan {
        batch_size,
        order,
        batches,
    })
}
