//! Two-party split learning over an in-process publish/subscribe broker.
//!
//! The active party holds labels, a bottom model and the top model; the
//! passive party holds a bottom model. Embeddings and cut-layer gradients
//! travel through per-batch channels so worker pools on both sides run
//! without pairwise rendezvous. The [`profiler`] fits a delay and memory
//! model, and the [`planner`] picks worker counts and a batch size from it.

pub mod broker;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod planner;
pub mod privacy;
pub mod profiler;
pub mod runtime;
pub mod split;
pub mod tensor;

pub use broker::{channel_count_for, Broker, BrokerStats, ChannelMessage, MessageKind, SubscribeOutcome};
pub use data::{generate_synthetic, load_csv, prepare, PreparedData, RawDataset, Task, VerticalDataset};
pub use error::{Error, Result};
pub use experiment::{DataSource, ExperimentSpec};
pub use kv::KvFile;
pub use metrics::{auc, rmse, EpochMetrics, RunMetrics, RunSummary};
pub use nn::{average_models, Activation, MlpModel, Optimizer, OptimizerState};
pub use planner::{brute_force_search, dp_search, iteration_objective, state_cost, PlanState, SearchSpace};
pub use privacy::{calibrate_sigma, GdpConfig};
pub use profiler::{fit_constants, fit_power_law, memory_bound, predict_times, run_calibration, DelayModelConstants};
pub use runtime::{run_baseline_mode, run_training, schedule_interval, Mode, TrainConfig, TrainOutcome};
pub use split::{ModelShape, SplitModels};
pub use tensor::DenseMatrix;
