//! Workers, per-batch steps, work queues and parameter servers.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::broker::{Broker, ChannelMessage, MessageKind};
use crate::data::{BatchPlan, Task};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, mse_loss};
use crate::metrics::PartyEpochStats;
use crate::nn::{average_models, ForwardTape, MlpModel, OptimizerState};
use crate::privacy::NoiseInjector;
use crate::runtime::config::Assignment;
use crate::runtime::schedule::SyncSchedule;
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Role {
    Active,
    Passive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    /// The active side reports the batch loss; the passive side has none.
    Completed { loss: Option<f64> },
    SkippedDeadline,
}

/// Everything a worker step reads besides its own replica.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub broker: &'a Broker,
    /// This party's training features.
    pub features: &'a DenseMatrix,
    /// Required by the active party only.
    pub labels: Option<&'a DenseMatrix>,
    pub task: Task,
    pub plan: &'a BatchPlan,
    pub epoch: usize,
    pub eta: f64,
    pub t_ddl: Duration,
    /// Artificial delay added to every forward pass.
    pub skew: Duration,
}

impl StepContext<'_> {
    fn batch(&self, batch_id: usize) -> Result<(Range<usize>, DenseMatrix)> {
        let batch = self.plan.batches.get(batch_id).ok_or(Error::UnknownBatch {
            batch_id,
            channels: self.plan.len(),
        })?;
        Ok((batch.range.clone(), self.features.select_rows(self.plan.indices(batch_id))))
    }

    fn skew_sleep(&self) {
        if !self.skew.is_zero() {
            std::thread::sleep(self.skew);
        }
    }

    fn check_aligned(&self, msg: &ChannelMessage, batch_id: usize, range: &Range<usize>) -> Result<()> {
        if msg.batch_id != batch_id || msg.epoch != self.epoch || msg.sample_range != *range {
            return Err(Error::Misaligned {
                batch_id,
                detail: format!(
                    "expected epoch {} samples {:?}, got batch {} epoch {} samples {:?}",
                    self.epoch, range, msg.batch_id, msg.epoch, msg.sample_range
                ),
            });
        }
        Ok(())
    }
}

/// Runs `f`, charging its duration to `busy`.
fn timed<T>(busy: &mut f64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *busy += start.elapsed().as_secs_f64();
    out
}

#[derive(Clone, Debug)]
pub struct PassiveWorker {
    pub id: usize,
    pub bottom: MlpModel,
    pub opt: OptimizerState,
    pub noise: NoiseInjector,
}

#[derive(Clone, Debug)]
pub struct ActiveWorker {
    pub id: usize,
    pub bottom: MlpModel,
    pub top: MlpModel,
    pub bottom_opt: OptimizerState,
    pub top_opt: OptimizerState,
}

/// A published embedding awaiting its gradient.
#[derive(Debug)]
pub struct Inflight {
    pub batch_id: usize,
    pub attempt: usize,
    range: Range<usize>,
    tape: ForwardTape,
    deadline: Instant,
}

/// Forward pass, noise and publish.
pub fn passive_worker_begin(
    worker: &mut PassiveWorker,
    ctx: &StepContext<'_>,
    batch_id: usize,
    attempt: usize,
    stats: &mut PartyEpochStats,
) -> Result<Inflight> {
    let (range, x) = ctx.batch(batch_id)?;
    let mut busy = 0.0;
    let (msg, tape) = timed(&mut busy, || -> Result<_> {
        ctx.skew_sleep();
        let (z, tape) = worker.bottom.forward(&x)?;
        let mut msg = ChannelMessage::new(
            MessageKind::Embedding,
            batch_id,
            ctx.epoch,
            z,
            range.clone(),
            worker.id,
            worker.bottom.param_version(),
        );
        worker.noise.apply(&mut msg)?;
        Ok((msg, tape))
    })?;
    stats.busy_seconds += busy;
    ctx.broker.publish(msg)?;
    Ok(Inflight {
        batch_id,
        attempt,
        range,
        tape,
        deadline: Instant::now() + ctx.t_ddl,
    })
}

/// Waits for the gradient, then backward pass and SGD.
pub fn passive_worker_finish(
    worker: &mut PassiveWorker,
    ctx: &StepContext<'_>,
    inflight: Inflight,
    stats: &mut PartyEpochStats,
) -> Result<StepOutcome> {
    let sub = ctx.broker.subscribe_until(
        MessageKind::Gradient,
        inflight.batch_id,
        inflight.deadline,
        worker.bottom.param_version(),
    )?;
    stats.wait_seconds += sub.waited.as_secs_f64();
    let Some(msg) = sub.message() else {
        return Ok(StepOutcome::SkippedDeadline);
    };
    ctx.check_aligned(&msg, inflight.batch_id, &inflight.range)?;
    let mut busy = 0.0;
    timed(&mut busy, || -> Result<()> {
        let (grads, _) = worker.bottom.backward(&inflight.tape, &msg.payload)?;
        worker.opt.step(&mut worker.bottom, &grads, ctx.eta)
    })?;
    stats.busy_seconds += busy;
    Ok(StepOutcome::Completed { loss: None })
}

/// One lock-step passive iteration.
pub fn passive_worker_step(
    worker: &mut PassiveWorker,
    ctx: &StepContext<'_>,
    batch_id: usize,
    stats: &mut PartyEpochStats,
) -> Result<StepOutcome> {
    let inflight = passive_worker_begin(worker, ctx, batch_id, 0, stats)?;
    passive_worker_finish(worker, ctx, inflight, stats)
}

/// Consumes the embedding, runs bottom and top models, publishes the
/// cut-layer gradient and updates the local replica.
pub fn active_worker_step(
    worker: &mut ActiveWorker,
    ctx: &StepContext<'_>,
    batch_id: usize,
    stats: &mut PartyEpochStats,
) -> Result<StepOutcome> {
    let labels = ctx
        .labels
        .ok_or_else(|| Error::config("active worker needs labels"))?;
    let (range, x) = ctx.batch(batch_id)?;
    let sub = ctx.broker.subscribe_until(
        MessageKind::Embedding,
        batch_id,
        Instant::now() + ctx.t_ddl,
        worker.top.param_version(),
    )?;
    stats.wait_seconds += sub.waited.as_secs_f64();
    let Some(msg) = sub.message() else {
        return Ok(StepOutcome::SkippedDeadline);
    };
    ctx.check_aligned(&msg, batch_id, &range)?;
    let y = labels.select_rows(ctx.plan.indices(batch_id));

    let mut busy = 0.0;
    let (loss, top_grads, tape_a, dza, dzp) = timed(&mut busy, || -> Result<_> {
        ctx.skew_sleep();
        let (za, tape_a) = worker.bottom.forward(&x)?;
        let (out, tape_top) = worker.top.forward(&za.hconcat(&msg.payload)?)?;
        let (loss, dout) = match ctx.task {
            Task::Classification => cross_entropy_loss(&out, &y)?,
            Task::Regression => mse_loss(&out, &y)?,
        };
        if !loss.is_finite() {
            return Err(Error::TrainingAbort {
                epoch: ctx.epoch,
                batch_id,
                reason: format!("non-finite loss {loss}"),
            });
        }
        let (top_grads, dz) = worker.top.backward(&tape_top, &dout)?;
        let (dza, dzp) = dz.split_cols(za.cols())?;
        Ok((loss, top_grads, tape_a, dza, dzp))
    })?;
    // Release the passive worker before finishing the local update.
    ctx.broker.publish(ChannelMessage::new(
        MessageKind::Gradient,
        batch_id,
        ctx.epoch,
        dzp,
        range,
        worker.id,
        msg.param_version,
    ))?;
    timed(&mut busy, || -> Result<()> {
        let (bottom_grads, _) = worker.bottom.backward(&tape_a, &dza)?;
        worker.top_opt.step(&mut worker.top, &top_grads, ctx.eta)?;
        worker.bottom_opt.step(&mut worker.bottom, &bottom_grads, ctx.eta)
    })?;
    stats.busy_seconds += busy;
    Ok(StepOutcome::Completed { loss: Some(loss) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkItem {
    pub batch_id: usize,
    pub attempt: usize,
}

/// Pending batch ids of one party for one epoch.
#[derive(Debug)]
pub struct WorkQueue {
    lanes: Vec<Mutex<VecDeque<WorkItem>>>,
}

impl WorkQueue {
    /// Batches `0..num_batches` in order, shared or striped over `workers`.
    pub fn new(num_batches: usize, workers: usize, assignment: Assignment) -> Self {
        let lanes = match assignment {
            Assignment::Dynamic => 1,
            Assignment::Static => workers.max(1),
        };
        let mut queues: Vec<VecDeque<WorkItem>> = vec![VecDeque::new(); lanes];
        for b in 0..num_batches {
            queues[b % lanes].push_back(WorkItem {
                batch_id: b,
                attempt: 0,
            });
        }
        Self {
            lanes: queues.into_iter().map(Mutex::new).collect(),
        }
    }

    fn lane(&self, worker: usize) -> &Mutex<VecDeque<WorkItem>> {
        &self.lanes[worker % self.lanes.len()]
    }

    pub fn pop(&self, worker: usize) -> Option<WorkItem> {
        self.lane(worker).lock().unwrap_or_else(|p| p.into_inner()).pop_front()
    }

    /// Sends a skipped batch to the back of the worker's lane.
    pub fn requeue(&self, worker: usize, task: WorkItem) {
        self.lane(worker)
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push_back(WorkItem {
                attempt: task.attempt + 1,
                ..task
            });
    }

    pub fn remaining(&self) -> usize {
        self.lanes
            .iter()
            .map(|l| l.lock().unwrap_or_else(|p| p.into_inner()).len())
            .sum()
    }
}

/// What one worker did in one epoch.
#[derive(Clone, Debug, Default)]
pub struct WorkerReport {
    pub stats: PartyEpochStats,
    /// `(batch_id, loss, samples)` for completed active batches.
    pub losses: Vec<(usize, f64, usize)>,
}

fn handle_skip(queue: &WorkQueue, worker: usize, task: WorkItem, max_retries: usize, stats: &mut PartyEpochStats) {
    if task.attempt < max_retries {
        stats.retries += 1;
        queue.requeue(worker, task);
    } else {
        stats.skipped += 1;
    }
}

/// Worker loop shared by every mode: keeps up to `inflight` embeddings
/// outstanding and resolves the oldest first.
pub fn run_passive_worker(
    worker: &mut PassiveWorker,
    ctx: &StepContext<'_>,
    queue: &WorkQueue,
    inflight: usize,
    max_retries: usize,
    abort: &AtomicBool,
) -> Result<WorkerReport> {
    let start = Instant::now();
    let mut report = WorkerReport::default();
    let mut pending: VecDeque<Inflight> = VecDeque::new();
    let result = (|| -> Result<()> {
        loop {
            if abort.load(Ordering::Relaxed) {
                return Ok(());
            }
            while pending.len() < inflight.max(1) {
                let Some(task) = queue.pop(worker.id) else { break };
                pending.push_back(passive_worker_begin(worker, ctx, task.batch_id, task.attempt, &mut report.stats)?);
            }
            let Some(next) = pending.pop_front() else {
                return Ok(());
            };
            let task = WorkItem {
                batch_id: next.batch_id,
                attempt: next.attempt,
            };
            match passive_worker_finish(worker, ctx, next, &mut report.stats)? {
                StepOutcome::Completed { .. } => report.stats.completed += 1,
                StepOutcome::SkippedDeadline => {
                    handle_skip(queue, worker.id, task, max_retries, &mut report.stats)
                }
            }
        }
    })();
    report.stats.worker_wall_seconds = start.elapsed().as_secs_f64();
    if result.is_err() {
        abort.store(true, Ordering::Relaxed);
    }
    result.map(|_| report)
}

pub fn run_active_worker(
    worker: &mut ActiveWorker,
    ctx: &StepContext<'_>,
    queue: &WorkQueue,
    max_retries: usize,
    abort: &AtomicBool,
) -> Result<WorkerReport> {
    let start = Instant::now();
    let mut report = WorkerReport::default();
    let result = (|| -> Result<()> {
        while !abort.load(Ordering::Relaxed) {
            let Some(task) = queue.pop(worker.id) else {
                return Ok(());
            };
            match active_worker_step(worker, ctx, task.batch_id, &mut report.stats)? {
                StepOutcome::Completed { loss } => {
                    report.stats.completed += 1;
                    let n = ctx.plan.batches[task.batch_id].len();
                    report.losses.push((task.batch_id, loss.unwrap_or(f64::NAN), n));
                }
                StepOutcome::SkippedDeadline => {
                    handle_skip(queue, worker.id, task, max_retries, &mut report.stats)
                }
            }
        }
        Ok(())
    })();
    report.stats.worker_wall_seconds = start.elapsed().as_secs_f64();
    if result.is_err() {
        abort.store(true, Ordering::Relaxed);
    }
    result.map(|_| report)
}

/// Access to the models a worker replicates.
pub trait Replica {
    fn models(&self) -> Vec<&MlpModel>;
    fn models_mut(&mut self) -> Vec<&mut MlpModel>;
}

impl Replica for PassiveWorker {
    fn models(&self) -> Vec<&MlpModel> {
        vec![&self.bottom]
    }

    fn models_mut(&mut self) -> Vec<&mut MlpModel> {
        vec![&mut self.bottom]
    }
}

impl Replica for ActiveWorker {
    fn models(&self) -> Vec<&MlpModel> {
        vec![&self.bottom, &self.top]
    }

    fn models_mut(&mut self) -> Vec<&mut MlpModel> {
        vec![&mut self.bottom, &mut self.top]
    }
}

/// A party's workers and its parameter server's reference models.
#[derive(Clone, Debug)]
pub struct PartyRuntime<W> {
    pub role: Role,
    pub workers: Vec<W>,
    pub ps_models: Vec<MlpModel>,
    pub syncs: usize,
}

impl<W: Replica> PartyRuntime<W> {
    pub fn new(role: Role, workers: Vec<W>) -> Result<Self> {
        let first = workers
            .first()
            .ok_or_else(|| Error::config("a party needs at least one worker"))?;
        let ps_models: Vec<MlpModel> = first.models().into_iter().cloned().collect();
        for w in &workers {
            let ok = w.models().iter().zip(&ps_models).all(|(a, b)| a.same_structure(b));
            if !ok {
                return Err(Error::config("worker replicas must match the parameter server model"));
            }
        }
        Ok(Self {
            role,
            workers,
            ps_models,
            syncs: 0,
        })
    }

    /// Average of the current worker replicas, slot by slot.
    pub fn averaged(&self) -> Result<Vec<MlpModel>> {
        (0..self.ps_models.len())
            .map(|slot| {
                let reps: Vec<&MlpModel> = self.workers.iter().map(|w| w.models()[slot]).collect();
                average_models(&reps)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AggregationReport {
    pub epoch: usize,
    pub interval: usize,
    pub synchronized: bool,
}

/// At sync epochs: average the replicas into the PS and broadcast back.
pub fn ps_aggregate<W: Replica>(
    party: &mut PartyRuntime<W>,
    epoch: usize,
    schedule: SyncSchedule,
) -> Result<AggregationReport> {
    let interval = schedule.interval(epoch);
    let synchronized = epoch % interval == 0;
    if synchronized {
        party.ps_models = party.averaged()?;
        for w in &mut party.workers {
            for (m, ps) in w.models_mut().into_iter().zip(&party.ps_models) {
                m.load_params(ps)?;
            }
        }
        party.syncs += 1;
    }
    Ok(AggregationReport {
        epoch,
        interval,
        synchronized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_batch_plan;
    use crate::nn::{Activation, Layer};

    fn scalar_model(w: f64) -> MlpModel {
        MlpModel::from_layers(vec![Layer {
            weight: DenseMatrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: DenseMatrix::zeros(1, 1),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn passive(id: usize, w: f64) -> PassiveWorker {
        PassiveWorker {
            id,
            opt: OptimizerState::new(crate::nn::Optimizer::Sgd, &scalar_model(w)),
            bottom: scalar_model(w),
            noise: NoiseInjector::new(0.0, 0, id).unwrap(),
        }
    }

    #[test]
    fn aggregation_averages_and_broadcasts() {
        let mut party = PartyRuntime::new(Role::Passive, vec![passive(0, 0.0), passive(1, 2.0)]).unwrap();
        let r = ps_aggregate(&mut party, 1, SyncSchedule::EveryEpoch).unwrap();
        assert!(r.synchronized);
        for w in &party.workers {
            assert_eq!(w.bottom.flat_params(), vec![1.0, 0.0]);
        }
        assert_eq!(party.ps_models[0].flat_params(), vec![1.0, 0.0]);
    }

    #[test]
    fn aggregation_fixed_point_and_skip() {
        let mut party = PartyRuntime::new(Role::Passive, vec![passive(0, 3.0), passive(1, 3.0)]).unwrap();
        ps_aggregate(&mut party, 1, SyncSchedule::EveryEpoch).unwrap();
        assert_eq!(party.ps_models[0].flat_params(), vec![3.0, 0.0]);
        party.workers[0].bottom = scalar_model(5.0);
        // Interval at epoch 5 is 3, so no sync.
        let r = ps_aggregate(&mut party, 5, SyncSchedule::SemiAsync { delta_t0: 5 }).unwrap();
        assert!(!r.synchronized);
        assert_eq!(party.workers[0].bottom.flat_params(), vec![5.0, 0.0]);
    }

    #[test]
    fn static_queue_stripes_and_requeues() {
        let q = WorkQueue::new(5, 2, Assignment::Static);
        assert_eq!(q.pop(1).unwrap().batch_id, 1);
        assert_eq!(q.pop(1).unwrap().batch_id, 3);
        let t = q.pop(0).unwrap();
        q.requeue(0, t);
        assert_eq!(q.pop(0).unwrap().batch_id, 2);
        assert_eq!(q.pop(0).unwrap().batch_id, 4);
        assert_eq!(q.pop(0).unwrap(), WorkItem { batch_id: 0, attempt: 1 });
        assert!(q.pop(1).is_none());
    }

    #[test]
    fn passive_step_times_out_without_active_party() {
        let broker = Broker::new(2, 5, 5).unwrap();
        let x = DenseMatrix::filled(4, 1, 1.0);
        let plan = make_batch_plan(4, 2, 0).unwrap();
        let ctx = StepContext {
            broker: &broker,
            features: &x,
            labels: None,
            task: Task::Classification,
            plan: &plan,
            epoch: 1,
            eta: 0.1,
            t_ddl: Duration::from_millis(20),
            skew: Duration::ZERO,
        };
        let mut w = passive(0, 1.0);
        let before = w.bottom.flat_params();
        let mut stats = PartyEpochStats::default();
        let out = passive_worker_step(&mut w, &ctx, 0, &mut stats).unwrap();
        assert_eq!(out, StepOutcome::SkippedDeadline);
        assert_eq!(w.bottom.flat_params(), before);
        assert!(stats.wait_seconds >= 0.015);
    }
}
