//! Tiling, mesh sharing and TEU lowering.

mod lowering;
mod plan;
mod sharing;
mod tiling;

use thiserror::Error;

pub use lowering::{
    best_lowering, factorizations, lane_orders, lower_to_teu, lower_with_capacity, operand_box,
    CycleOp, LaneMap, TeuProgram,
};
pub use plan::{plan_vectormesh, PlanRequest, VmPlan};
pub use sharing::{
    default_assignment, sharing_axes, AxisAssignment, MeshAxis, OperandSharing, SharingPlan,
};
pub use tiling::{
    better, enumerate_tiles, enumerate_tiles_in, footprint, select_tile, select_tile_in,
    BufferBudget, SearchSpace, TileScheme,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("tile has {got} extents, workload rank is {want}")]
    TileRank { got: usize, want: usize },
    #[error("tile extent {tile} on index {index} outside 1..={extent}")]
    TileExtent {
        index: usize,
        tile: usize,
        extent: usize,
    },
    #[error("{what} needs {need} words, capacity is {have}")]
    Capacity {
        what: &'static str,
        need: u64,
        have: u64,
    },
    #[error("no tile fits buffers {0:?}")]
    NoFeasibleTile(BufferBudget),
    #[error("buffer capacity must be positive")]
    ZeroBuffer,
    #[error("invalid mesh assignment: {0}")]
    InvalidAssignment(String),
    #[error("invalid lane factorization: {0}")]
    Factorization(String),
    #[error("operand {operand} has no conflict-free layout for lanes {lanes:?}")]
    Unroutable { operand: String, lanes: LaneMap },
    #[error("no routable lowering for tile {0:?}")]
    NoLowering(Vec<usize>),
}
