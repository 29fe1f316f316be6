//! Epoch loop: both parties' worker pools, parameter-server sync,
//! evaluation and metrics.

use std::sync::atomic::AtomicBool;
use std::time::Instant;

use crate::broker::Broker;
use crate::data::{make_batch_plan, BatchPlan, PreparedData, Task, VerticalDataset};
use crate::error::{Error, Result};
use crate::metrics::{auc, rmse, EpochMetrics, PartyEpochStats, RunMetrics};
use crate::nn::OptimizerState;
use crate::privacy::{calibrate_sigma, GdpConfig, NoiseInjector};
use crate::runtime::config::{Mode, TrainConfig};
use crate::runtime::party::{
    ps_aggregate, run_active_worker, run_passive_worker, ActiveWorker, PartyRuntime, PassiveWorker, Role,
    StepContext, WorkQueue, WorkerReport,
};
use crate::split::SplitModels;

/// Shuffled batch plan of epoch `epoch`; both parties derive it identically.
pub fn epoch_plan(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<BatchPlan> {
    make_batch_plan(n, batch_size, seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Sample-weighted mean of `(batch_id, loss, samples)`, accumulated in batch
/// id order. `NaN` when empty.
pub fn weighted_mean_loss(losses: &[(usize, f64, usize)]) -> f64 {
    let mut sorted = losses.to_vec();
    sorted.sort_by_key(|l| l.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (_, loss, n) in sorted {
        sum += loss * n as f64;
        count += n;
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// AUC for classification, RMSE for regression.
pub fn evaluate(models: &SplitModels, data: &VerticalDataset) -> Result<f64> {
    let pred = models.predict(&data.active_features, &data.passive_features)?;
    match data.task {
        Task::Classification => auc(pred.as_slice(), data.labels.as_slice()),
        Task::Regression => rmse(pred.as_slice(), data.labels.as_slice()),
    }
}

/// `σ` for a run: the minibatch is the batch size, the whole batch the
/// training set, and the query count the batches one passive worker
/// publishes over the run.
pub fn run_gdp_config(config: &TrainConfig, n_train: usize) -> Result<GdpConfig> {
    let nb = n_train.div_ceil(config.batch_size);
    Ok(GdpConfig {
        mu: config.mu,
        minibatch_size: config.batch_size.min(n_train),
        whole_batch_size: n_train,
        num_queries: nb.div_ceil(config.w_p) * config.epochs,
        scale_constant: config.gdp_scale,
        delta: config.gdp_delta,
        seed: config.seed,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: SplitModels,
    pub metrics: RunMetrics,
    pub sigma_dp: f64,
}

impl TrainOutcome {
    /// Test metric after every epoch.
    pub fn evals(&self) -> Vec<f64> {
        self.metrics.test_metrics()
    }
}

fn merge(reports: &[WorkerReport]) -> PartyEpochStats {
    let mut s = PartyEpochStats::default();
    for r in reports {
        s.merge(&r.stats);
    }
    s
}

fn current_models(
    active: &PartyRuntime<ActiveWorker>,
    passive: &PartyRuntime<PassiveWorker>,
) -> Result<SplitModels> {
    let mut a = active.averaged()?;
    let top = a.pop().expect("active replica holds two models");
    let active_bottom = a.pop().expect("active replica holds two models");
    let passive_bottom = passive.averaged()?.pop().expect("passive replica holds one model");
    Ok(SplitModels {
        active_bottom,
        top,
        passive_bottom,
    })
}

/// Trains from seeded initial models.
pub fn run_training(data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let models = SplitModels::init(
        &config.shape,
        data.train.d_active(),
        data.train.d_passive(),
        data.train.task,
        config.seed,
    )?;
    run_training_from(data, config, models)
}

/// Same as [`run_training`] for every mode other than `PubSubVFL`.
pub fn run_baseline_mode(data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.mode == Mode::PubSubVfl {
        return Err(Error::config("run_baseline_mode expects a baseline mode"));
    }
    run_training(data, config)
}

/// Trains starting from the given models.
pub fn run_training_from(data: &PreparedData, config: &TrainConfig, init: SplitModels) -> Result<TrainOutcome> {
    config.validate()?;
    let train = &data.train;
    let n = train.n();
    if config.batch_size > n {
        return Err(Error::config(format!(
            "batch size {} exceeds the {n} training samples",
            config.batch_size
        )));
    }
    let nb = n.div_ceil(config.batch_size);
    let sigma = calibrate_sigma(&run_gdp_config(config, n)?)?;
    let (p, q) = config.capacities();
    let broker = Broker::new(nb, p, q)?;
    let schedule = config.schedule();
    let assignment = config.assignment();
    let inflight = config.inflight();

    let mut active = PartyRuntime::new(
        Role::Active,
        (0..config.w_a)
            .map(|id| ActiveWorker {
                id,
                bottom: init.active_bottom.clone(),
                top: init.top.clone(),
                bottom_opt: OptimizerState::new(config.optimizer, &init.active_bottom),
                top_opt: OptimizerState::new(config.optimizer, &init.top),
            })
            .collect(),
    )?;
    let mut passive = PartyRuntime::new(
        Role::Passive,
        (0..config.w_p)
            .map(|id| {
                Ok(PassiveWorker {
                    id,
                    bottom: init.passive_bottom.clone(),
                    opt: OptimizerState::new(config.optimizer, &init.passive_bottom),
                    noise: NoiseInjector::new(sigma, config.seed, id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    )?;

    let mut metrics = RunMetrics::default();
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        let plan = epoch_plan(n, config.batch_size, config.seed, epoch)?;
        let a_queue = WorkQueue::new(nb, config.w_a, assignment);
        let p_queue = WorkQueue::new(nb, config.w_p, assignment);
        let abort = AtomicBool::new(false);
        let base = StepContext {
            broker: &broker,
            features: &train.passive_features,
            labels: None,
            task: train.task,
            plan: &plan,
            epoch,
            eta: config.eta,
            t_ddl: config.t_ddl,
            skew: config.skew_passive,
        };
        let p_ctx = base;
        let a_ctx = StepContext {
            features: &train.active_features,
            labels: Some(&train.labels),
            skew: config.skew_active,
            ..base
        };

        let start = Instant::now();
        let (a_results, p_results) = std::thread::scope(|s| {
            let p_handles: Vec<_> = passive
                .workers
                .iter_mut()
                .map(|w| {
                    let (ctx, queue, abort) = (&p_ctx, &p_queue, &abort);
                    s.spawn(move || run_passive_worker(w, ctx, queue, inflight, config.max_retries, abort))
                })
                .collect();
            let a_handles: Vec<_> = active
                .workers
                .iter_mut()
                .map(|w| {
                    let (ctx, queue, abort) = (&a_ctx, &a_queue, &abort);
                    s.spawn(move || run_active_worker(w, ctx, queue, config.max_retries, abort))
                })
                .collect();
            let join = |h: std::thread::ScopedJoinHandle<'_, Result<WorkerReport>>| {
                h.join().unwrap_or_else(|_| Err(Error::config("worker thread panicked")))
            };
            let a: Vec<_> = a_handles.into_iter().map(join).collect();
            let p: Vec<_> = p_handles.into_iter().map(join).collect();
            (a, p)
        });
        let wall = start.elapsed().as_secs_f64();
        // A training abort outranks the secondary errors it causes elsewhere.
        let mut results: Vec<Result<WorkerReport>> = a_results.into_iter().chain(p_results).collect();
        if let Some(pos) = results
            .iter()
            .position(|r| matches!(r, Err(Error::TrainingAbort { .. })))
            .or_else(|| results.iter().position(Result::is_err))
        {
            return Err(results.swap_remove(pos).unwrap_err());
        }
        let reports: Vec<WorkerReport> = results.into_iter().map(|r| r.expect("checked")).collect();
        let (a_reports, p_reports) = reports.split_at(config.w_a);

        let a_sync = ps_aggregate(&mut active, epoch, schedule)?;
        let p_sync = ps_aggregate(&mut passive, epoch, schedule)?;
        broker.drain();

        let a_stats = merge(a_reports);
        let p_stats = merge(p_reports);
        let losses: Vec<(usize, f64, usize)> = a_reports.iter().flat_map(|r| r.losses.iter().copied()).collect();
        let mean_loss = weighted_mean_loss(&losses);
        let test_metric = evaluate(&current_models(&active, &passive)?, &data.test)?;
        let stats = broker.stats();
        let worker_wall = a_stats.worker_wall_seconds + p_stats.worker_wall_seconds;
        let busy = a_stats.busy_seconds + p_stats.busy_seconds;
        let record = EpochMetrics {
            epoch,
            wall_seconds: wall,
            mean_train_loss: mean_loss,
            test_metric,
            total_wait_seconds: a_stats.wait_seconds + p_stats.wait_seconds,
            busy_fraction: if worker_wall > 0.0 { (busy / worker_wall).clamp(0.0, 1.0) } else { 0.0 },
            bytes_published: stats.bytes_published,
            batches_completed: a_stats.completed,
            batches_skipped: a_stats.skipped,
            retries: a_stats.retries,
            evictions: stats.evicted,
            sync_performed: a_sync.synchronized || p_sync.synchronized,
            active: a_stats,
            passive: p_stats,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.6} test {:.4} wall {:.3}s",
            config.mode,
            record.mean_train_loss,
            record.test_metric,
            wall
        );
        metrics.epochs.push(record);
        if mean_loss <= config.kappa {
            stopped_early = epoch < config.epochs;
            break;
        }
    }
    metrics.finalize(
        config.mode.name(),
        config.target_auc,
        train.task == Task::Classification,
        stopped_early,
        sigma,
    );
    Ok(TrainOutcome {
        models: current_models(&active, &passive)?,
        metrics,
        sigma_dp: sigma,
    })
}
