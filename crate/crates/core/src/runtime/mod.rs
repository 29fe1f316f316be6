//! Two-party training engine: worker pools on both sides exchanging
//! embeddings and cut-layer gradients through the broker.

pub mod config;
pub mod engine;
pub mod party;
pub mod schedule;

pub use config::{Assignment, Mode, TrainConfig};
pub use engine::{
    epoch_plan, evaluate, run_baseline_mode, run_gdp_config, run_training, run_training_from, weighted_mean_loss,
    TrainOutcome,
};
pub use party::{
    active_worker_step, passive_worker_begin, passive_worker_finish, passive_worker_step, ps_aggregate,
    run_active_worker, run_passive_worker, ActiveWorker, AggregationReport, Inflight, PartyRuntime, PassiveWorker,
    Replica, Role, StepContext, StepOutcome, WorkItem, WorkQueue, WorkerReport,
};
pub use schedule::{schedule_interval, SyncSchedule};
