//! Metrics, synthetic tasks, the few-shot protocol and sweeps.

pub mod metrics;
mod protocol;
mod sweep;
pub mod synthetic;

pub use metrics::{accuracy, mcc, Metric};
pub use protocol::{load_unlabeled, mean_std, run_protocol, ExperimentReport, RunRecord, TaskData};
pub use sweep::{sweep, SweepAxis, SweepRow};
pub use synthetic::{make_synthetic_task, SyntheticTask, TaskKind, TaskSizes};
