use serde::{Deserialize, Serialize};

use crate::tensor::OutTensor;

/// Stall cycles by cause, summed over TEUs (or PE arrays for baselines).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stalls {
    pub dram: u64,
    pub glb: u64,
    pub fifo_empty: u64,
    pub fifo_full: u64,
    pub tile_bubble: u64,
}

impl Stalls {
    pub fn total(&self) -> u64 {
        self.dram + self.glb + self.fifo_empty + self.fifo_full + self.tile_bubble
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    pub arch: String,
    pub workload: String,
    pub n_pe: usize,
    pub clock_hz: f64,
    pub cycles: u64,
    pub macs: u64,
    pub glb_read_bytes: u64,
    pub glb_write_bytes: u64,
    /// DRAM-to-GLB fill traffic, kept apart from TEU-side GLB accesses.
    pub glb_fill_bytes: u64,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    pub fifo_words_transferred: u64,
    pub stalls: Stalls,
    pub bank_checks: u64,
    pub output: Option<OutTensor>,
}

impl SimResult {
    pub fn new(arch: &str, workload: &str, n_pe: usize, clock_hz: f64) -> Self {
        SimResult {
            arch: arch.into(),
            workload: workload.into(),
            n_pe,
            clock_hz,
            cycles: 0,
            macs: 0,
            glb_read_bytes: 0,
            glb_write_bytes: 0,
            glb_fill_bytes: 0,
            dram_read_bytes: 0,
            dram_write_bytes: 0,
            fifo_words_transferred: 0,
            stalls: Stalls::default(),
            bank_checks: 0,
            output: None,
        }
    }

    pub fn utilization(&self) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        self.macs as f64 / (self.cycles as f64 * self.n_pe as f64)
    }

    /// Achieved GOPS (one MAC is two operations).
    pub fn gops(&self) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        2.0 * self.macs as f64 / (self.cycles as f64 / self.clock_hz) / 1e9
    }

    pub fn stats(&self) -> StatsRow {
        StatsRow {
            arch: self.arch.clone(),
            workload: self.workload.clone(),
            n_pe: self.n_pe,
            cycles: self.cycles,
            macs: self.macs,
            utilization: format!("{:.6}", self.utilization()),
            gops: format!("{:.6}", self.gops()),
            glb_read_bytes: self.glb_read_bytes,
            glb_write_bytes: self.glb_write_bytes,
            glb_fill_bytes: self.glb_fill_bytes,
            dram_read_bytes: self.dram_read_bytes,
            dram_write_bytes: self.dram_write_bytes,
            fifo_words: self.fifo_words_transferred,
            stall_dram: self.stalls.dram,
            stall_glb: self.stalls.glb,
            stall_fifo_empty: self.stalls.fifo_empty,
            stall_fifo_full: self.stalls.fifo_full,
            stall_tile_bubble: self.stalls.tile_bubble,
        }
    }
}

/// One line of a stats file. Floats are pre-formatted so files compare
/// byte for byte.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub arch: String,
    pub workload: String,
    pub n_pe: usize,
    pub cycles: u64,
    pub macs: u64,
    pub utilization: String,
    pub gops: String,
    pub glb_read_bytes: u64,
    pub glb_write_bytes: u64,
    pub glb_fill_bytes: u64,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    pub fifo_words: u64,
    pub stall_dram: u64,
    pub stall_glb: u64,
    pub stall_fifo_empty: u64,
    pub stall_fifo_full: u64,
    pub stall_tile_bubble: u64,
}
