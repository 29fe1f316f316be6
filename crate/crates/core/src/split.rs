//! The three models of two-party split learning: the active bottom model, the
//! passive bottom model, and the active party's top model over the
//! concatenated embeddings `[z_active | z_passive]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpModel};
use crate::tensor::DenseMatrix;

/// Layer widths. Bottom models map features through `bottom_hidden` to an
/// `embedding_dim`-wide ReLU embedding; the top model maps the
/// `2 * embedding_dim` concatenation through `top_hidden` to one output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub bottom_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub top_hidden: Vec<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            bottom_hidden: vec![32],
            embedding_dim: 16,
            top_hidden: vec![16],
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.bottom_hidden.contains(&0) || self.top_hidden.contains(&0) {
            return Err(Error::config(format!("layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn bottom_dims(&self, d_in: usize) -> Vec<usize> {
        let mut dims = vec![d_in];
        dims.extend(&self.bottom_hidden);
        dims.push(self.embedding_dim);
        dims
    }

    fn top_dims(&self) -> Vec<usize> {
        let mut dims = vec![2 * self.embedding_dim];
        dims.extend(&self.top_hidden);
        dims.push(1);
        dims
    }
}

/// Output activation of the top model.
pub fn output_activation(task: Task) -> Activation {
    match task {
        Task::Classification => Activation::Sigmoid,
        Task::Regression => Activation::Identity,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitModels {
    pub active_bottom: MlpModel,
    pub top: MlpModel,
    pub passive_bottom: MlpModel,
}

impl SplitModels {
    /// Seeded initialisation; the passive model draws from its own stream so
    /// each party can initialise locally.
    pub fn init(shape: &ModelShape, d_active: usize, d_passive: usize, task: Task, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut active_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut passive_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        let active_bottom =
            MlpModel::init(&shape.bottom_dims(d_active), Activation::Relu, Activation::Relu, &mut active_rng)?;
        let top = MlpModel::init(&shape.top_dims(), Activation::Relu, output_activation(task), &mut active_rng)?;
        let passive_bottom =
            MlpModel::init(&shape.bottom_dims(d_passive), Activation::Relu, Activation::Relu, &mut passive_rng)?;
        Ok(Self {
            active_bottom,
            top,
            passive_bottom,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.passive_bottom.output_dim()
    }

    /// Noise-free prediction for evaluation.
    pub fn predict(&self, active_x: &DenseMatrix, passive_x: &DenseMatrix) -> Result<DenseMatrix> {
        let za = self.active_bottom.predict(active_x)?;
        let zp = self.passive_bottom.predict(passive_x)?;
        self.top.predict(&za.hconcat(&zp)?)
    }
}
