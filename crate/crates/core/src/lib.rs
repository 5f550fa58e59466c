//! Cycle-level simulation and scheduling for a mesh-of-TEUs dense tensor
//! accelerator, with systolic and row-stationary reference models.

pub mod analysis;
pub mod baselines;
pub mod bfn;
pub mod catalog;
pub mod manifest;
pub mod schedule;
pub mod simcore;
pub mod tensor;
pub mod workload;
