//! Shared fixtures and a single-process reference trainer.

#![allow(dead_code)]

use vflbus_core::data::{generate_synthetic, prepare, PreparedData, Task};
use vflbus_core::loss::{cross_entropy_loss, mse_loss};
use vflbus_core::nn::OptimizerState;
use vflbus_core::runtime::{epoch_plan, weighted_mean_loss};
use vflbus_core::{SplitModels, TrainConfig};

/// Synthetic data prepared with an even column split.
pub fn synthetic(n: usize, d: usize, task: Task, seed: u64) -> PreparedData {
    let raw = generate_synthetic(n, d, (d / 5).max(1), task, seed).expect("synthetic data");
    prepare(&raw, d / 2, 0.7, seed).expect("prepare")
}

/// Result of the reference trainer.
pub struct OracleRun {
    pub losses: Vec<f64>,
    pub models: SplitModels,
}

/// Trains all three models in one thread: every batch of every epoch in
/// batch-id order, forward through both bottoms and the top, backward, and
/// one optimizer step per model. No broker, no noise, no workers.
pub fn oracle_train(data: &PreparedData, config: &TrainConfig) -> OracleRun {
    let train = &data.train;
    let mut m = SplitModels::init(
        &config.shape,
        train.d_active(),
        train.d_passive(),
        train.task,
        config.seed,
    )
    .expect("init");
    let mut opt_a = OptimizerState::new(config.optimizer, &m.active_bottom);
    let mut opt_top = OptimizerState::new(config.optimizer, &m.top);
    let mut opt_p = OptimizerState::new(config.optimizer, &m.passive_bottom);
    let mut losses = Vec::new();
    for epoch in 1..=config.epochs {
        let plan = epoch_plan(train.n(), config.batch_size, config.seed, epoch).expect("plan");
        let mut batch_losses = Vec::new();
        for b in 0..plan.len() {
            let idx = plan.indices(b);
            let xa = train.active_features.select_rows(idx);
            let xp = train.passive_features.select_rows(idx);
            let y = train.labels.select_rows(idx);
            let (za, tape_a) = m.active_bottom.forward(&xa).unwrap();
            let (zp, tape_p) = m.passive_bottom.forward(&xp).unwrap();
            let (out, tape_top) = m.top.forward(&za.hconcat(&zp).unwrap()).unwrap();
            let (loss, dout) = match train.task {
                Task::Classification => cross_entropy_loss(&out, &y).unwrap(),
                Task::Regression => mse_loss(&out, &y).unwrap(),
            };
            let (g_top, dz) = m.top.backward(&tape_top, &dout).unwrap();
            let (dza, dzp) = dz.split_cols(za.cols()).unwrap();
            let (g_a, _) = m.active_bottom.backward(&tape_a, &dza).unwrap();
            let (g_p, _) = m.passive_bottom.backward(&tape_p, &dzp).unwrap();
            opt_top.step(&mut m.top, &g_top, config.eta).unwrap();
            opt_a.step(&mut m.active_bottom, &g_a, config.eta).unwrap();
            opt_p.step(&mut m.passive_bottom, &g_p, config.eta).unwrap();
            batch_losses.push((b, loss, idx.len()));
        }
        losses.push(weighted_mean_loss(&batch_losses));
    }
    OracleRun { losses, models: m }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
