//! Energy-aware loop partitioning and power-failure-resilient execution.

mod engine;
mod quanta;
mod snapshot;

use thiserror::Error;

pub use engine::{
    run_intermittent, Conv2dTask, EngineConfig, EventKind, ExecutionLog, FailurePoint, FailureSchedule, GemmTask,
    LogEvent, ResumableKernel, RunOutcome,
};
pub use quanta::{cursor_of, fuse_tasks, optimize_quanta, Quanta, QuantaPlan};
pub use snapshot::{load_state, save_state, CheckpointState, Nvm, PartialOutput, SnapshotError, SNAPSHOT_VERSION};

use crate::devmodel::DevModelError;
use crate::kernels::KernelError;

#[derive(Debug, Error)]
pub enum IntermittentError {
    #[error("budget {budget} uJ cannot fit one iteration ({e_iter} uJ) plus a checkpoint ({e_ckpt} uJ)")]
    InfeasibleBudget { e_iter: f64, e_ckpt: f64, budget: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid quanta plan: {0}")]
    InvalidPlan(String),
    #[error("no progress after waiting {waited_s:.3} s for {needed_nj} nJ (stored {stored_nj} nJ)")]
    Starvation { waited_s: f64, needed_nj: u64, stored_nj: u64 },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Device(#[from] DevModelError),
}
