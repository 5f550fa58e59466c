//! VectorMesh cycle-level simulator.

mod config;
mod machine;
mod memory;
mod result;

use thiserror::Error;

pub use config::{ArchConfig, ConfigError};
pub use machine::{build_machine, run, Machine, RunOptions};
pub use memory::{Dram, Served, Txn};
pub use result::{SimResult, Stalls, StatsRow};

use crate::schedule::{plan_vectormesh, ScheduleError, VmPlan};
use crate::tensor::InTensor;
use crate::workload::{Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("bank conflict at cycle {cycle}, TEU {teu}, operand {operand}: {detail}")]
    Bank {
        cycle: u64,
        teu: usize,
        operand: usize,
        detail: String,
    },
    #[error("no progress since cycle {cycle}")]
    Deadlock { cycle: u64 },
    #[error("plan does not match the machine: {0}")]
    PlanMismatch(String),
    #[error("unsupported workload: {0}")]
    Unsupported(String),
}

/// Plans `w` for `cfg` with default search settings.
pub fn plan_for(cfg: &ArchConfig, w: &Workload) -> Result<VmPlan, SimError> {
    cfg.validate()?;
    Ok(plan_vectormesh(w, &cfg.plan_request())?)
}

/// Plan and run in one call.
pub fn run_vectormesh(
    cfg: &ArchConfig,
    w: &Workload,
    inputs: &[InTensor],
    opts: RunOptions,
) -> Result<SimResult, SimError> {
    let plan = plan_for(cfg, w)?;
    let mut m = build_machine(cfg)?;
    run(&mut m, w, &plan, inputs, opts)
}
