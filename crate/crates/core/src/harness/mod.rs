//! The continual-learning protocol: sequential task training, router
//! learning from memory, evaluation, sweeps and cost estimates.

pub mod commands;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod flops;
pub mod pipeline;
pub mod report;

pub use config::{DataConfig, IngestConfig, MemoryConfig, RouterConfig, RunConfig, TrainingConfig};
pub use eval::{Evaluation, Evaluator, RoutingMatrix};
pub use experiments::{ablate_relaxation, sweep_memory, AblationReport, AblationRow, SweepRow};
pub use flops::{estimate_flops, FlopsEstimate, FlopsMethod, FlopsShape};
pub use pipeline::{router_example_loss, run_stream, run_stream_with_hook, train_router, train_routers, Routers, TaskLog, TrainedRouter, TrainedState};
pub use report::RunReport;
