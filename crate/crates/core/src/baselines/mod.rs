//! Reference models of a weight-stationary systolic array and a
//! row-stationary array.
//!
//! Both are pass-level models. A pass is one residency of the array's
//! stationary data; its length is the larger of the array's compute time
//! and the time to move its GLB traffic at the GLB rate. Passes are grouped
//! into units whose DRAM inputs are fetched (double-buffered, one unit
//! ahead) before the unit starts and whose outputs are written once, after
//! the unit's last pass. DRAM is a single serial channel with a fixed rate
//! and a fixed read latency.
//!
//! GLB residency is decided per operand: an operand block is kept across
//! the loop that reuses it when it fits in half of the GLB space left after
//! the double-buffered accumulators, and fetched again per unit otherwise.
//! Arbitration inside the array and the on-chip network are not modeled.

mod eyeriss;
mod gemm_view;
mod systolic;

use serde::{Deserialize, Serialize};

pub use eyeriss::{rs_mapping, run_eyeriss, RsMapping};
pub use systolic::{run_systolic, systolic_schedule, SystolicSchedule};

use crate::simcore::{ConfigError, SimError, SimResult};
use crate::tensor::InTensor;
use crate::workload::{Geometry, Workload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Systolic,
    RowStationary,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Systolic => "systolic",
            BaselineKind::RowStationary => "row-stationary",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub pe_rows: usize,
    pub pe_cols: usize,
    pub local_buf_bytes_per_pe: u64,
    pub glb_bytes: u64,
    pub clock_hz: f64,
    pub dram_bytes_per_sec: f64,
    pub glb_bytes_per_sec: f64,
    pub dram_latency_cycles: u64,
    pub word_bytes: u64,
    pub psum_bytes: u64,
}

/// `rows × cols` with rows the largest divisor not above `sqrt(n / 2)`.
fn array_shape(n_pe: usize) -> Result<(usize, usize), ConfigError> {
    if n_pe < 2 {
        return Err(ConfigError::new(
            "pes",
            format!("{n_pe} PEs cannot form an array"),
        ));
    }
    let mut rows = ((n_pe / 2) as f64).sqrt() as usize;
    while rows > 1 && n_pe % rows != 0 {
        rows -= 1;
    }
    Ok((rows.max(1), n_pe / rows.max(1)))
}

impl BaselineConfig {
    pub fn systolic(n_pe: usize) -> Result<Self, ConfigError> {
        let (pe_rows, pe_cols) = array_shape(n_pe)?;
        Ok(BaselineConfig {
            kind: BaselineKind::Systolic,
            pe_rows,
            pe_cols,
            local_buf_bytes_per_pe: 0,
            glb_bytes: 1024 * n_pe as u64,
            clock_hz: 2.0e8,
            dram_bytes_per_sec: 6.4e9,
            glb_bytes_per_sec: 2.56e10,
            dram_latency_cycles: 100,
            word_bytes: 2,
            psum_bytes: 4,
        })
    }

    pub fn row_stationary(n_pe: usize) -> Result<Self, ConfigError> {
        Ok(BaselineConfig {
            kind: BaselineKind::RowStationary,
            local_buf_bytes_per_pe: 307,
            glb_bytes: 512 * n_pe as u64,
            ..Self::systolic(n_pe)?
        })
    }

    pub fn for_kind(kind: BaselineKind, n_pe: usize) -> Result<Self, ConfigError> {
        match kind {
            BaselineKind::Systolic => Self::systolic(n_pe),
            BaselineKind::RowStationary => Self::row_stationary(n_pe),
        }
    }

    pub fn n_pe(&self) -> usize {
        self.pe_rows * self.pe_cols
    }

    pub fn dram_bytes_per_cycle(&self) -> f64 {
        self.dram_bytes_per_sec / self.clock_hz
    }

    pub fn glb_bytes_per_cycle(&self) -> f64 {
        self.glb_bytes_per_sec / self.clock_hz
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.pe_rows == 0 {
            return Err(ConfigError::new("pe_rows", "must be positive"));
        }
        if self.pe_cols == 0 {
            return Err(ConfigError::new("pe_cols", "must be positive"));
        }
        match self.kind {
            BaselineKind::Systolic if self.local_buf_bytes_per_pe != 0 => {
                return Err(ConfigError::new(
                    "local_buf_bytes_per_pe",
                    "a systolic array has no local buffer",
                ))
            }
            BaselineKind::RowStationary if self.local_buf_bytes_per_pe < 8 => {
                return Err(ConfigError::new(
                    "local_buf_bytes_per_pe",
                    "must hold one weight, one input word and one PSum",
                ))
            }
            _ => {}
        }
        for (field, v) in [
            ("clock_hz", self.clock_hz),
            ("dram_bytes_per_sec", self.dram_bytes_per_sec),
            ("glb_bytes_per_sec", self.glb_bytes_per_sec),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::new(field, "must be positive"));
            }
        }
        if self.dram_bytes_per_cycle() < 1.0 || self.glb_bytes_per_cycle() < 1.0 {
            return Err(ConfigError::new(
                "dram_bytes_per_sec",
                "rates below one byte per cycle are not modeled",
            ));
        }
        if self.word_bytes != 2 || self.psum_bytes != 4 {
            return Err(ConfigError::new(
                "word_bytes",
                "the functional model stores 2-byte words and 4-byte psums",
            ));
        }
        let acc_min = 4 * self.psum_bytes * self.pe_cols as u64;
        if self.glb_bytes < 2 * acc_min {
            return Err(ConfigError::new(
                "glb_bytes",
                "cannot hold one row of accumulators",
            ));
        }
        Ok(())
    }
}

/// Runs either baseline; `inputs` switches on functional evaluation.
pub fn run_baseline(
    cfg: &BaselineConfig,
    w: &Workload,
    inputs: Option<&[InTensor]>,
) -> Result<SimResult, SimError> {
    match cfg.kind {
        BaselineKind::Systolic => run_systolic(cfg, w, inputs),
        BaselineKind::RowStationary => run_eyeriss(cfg, w, inputs),
    }
}

fn precheck(
    cfg: &BaselineConfig,
    w: &Workload,
    inputs: Option<&[InTensor]>,
) -> Result<(), SimError> {
    cfg.validate()?;
    w.validate()?;
    if let Geometry::Correlation { .. } = w.geometry {
        return Err(SimError::Unsupported(format!(
            "{} cannot run correlation workload `{}`",
            cfg.kind.name(),
            w.name
        )));
    }
    if w.operands
        .iter()
        .any(|o| o.word_bytes as u64 != cfg.word_bytes)
        || w.psum_bytes as u64 != cfg.psum_bytes
    {
        return Err(SimError::Unsupported(format!(
            "`{}` word sizes differ from the configuration",
            w.name
        )));
    }
    if let Some(inp) = inputs {
        w.check_inputs(inp)?;
    }
    Ok(())
}

/// DRAM-side description of one unit and the passes inside it.
#[derive(Clone, Copy, Debug, Default)]
struct Unit {
    fetch_bytes: u64,
    write_bytes: u64,
    /// Array-busy cycles, including GLB-bound stretches.
    cycles: u64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Timeline {
    cycles: u64,
    dram_stall: u64,
}

/// Overlaps each unit's fetch with the previous unit's compute on one
/// serial DRAM channel; writes are queued when their unit finishes.
fn timeline(units: &[Unit], dram_rate: f64, latency: u64) -> Timeline {
    let mut t_dram = 0.0f64;
    let mut comp_end = 0u64;
    let mut prev_start = 0u64;
    let mut stall = 0u64;
    let mut writes: std::collections::VecDeque<(u64, u64)> = Default::default();
    let flush = |t_dram: &mut f64,
                 writes: &mut std::collections::VecDeque<(u64, u64)>,
                 upto: Option<u64>| {
        while let Some(&(at, b)) = writes.front() {
            if upto.is_some_and(|u| at > u) {
                break;
            }
            *t_dram = t_dram.max(at as f64) + b as f64 / dram_rate;
            writes.pop_front();
        }
    };
    for (i, u) in units.iter().enumerate() {
        let issue = if i == 0 { 0 } else { prev_start };
        flush(&mut t_dram, &mut writes, Some(issue));
        let ready = if u.fetch_bytes > 0 {
            t_dram = t_dram.max(issue as f64) + u.fetch_bytes as f64 / dram_rate;
            t_dram.ceil() as u64 + latency
        } else {
            issue
        };
        let start = comp_end.max(ready);
        stall += start - comp_end;
        comp_end = start + u.cycles;
        prev_start = start;
        if u.write_bytes > 0 {
            writes.push_back((comp_end, u.write_bytes));
        }
    }
    flush(&mut t_dram, &mut writes, None);
    let end = comp_end.max(t_dram.ceil() as u64);
    Timeline {
        cycles: end,
        dram_stall: stall + (end - comp_end),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let s = BaselineConfig::systolic(128).unwrap();
        assert_eq!((s.pe_rows, s.pe_cols, s.glb_bytes), (8, 16, 131072));
        let r = BaselineConfig::row_stationary(512).unwrap();
        assert_eq!((r.pe_rows, r.pe_cols, r.glb_bytes), (16, 32, 262144));
        assert_eq!(r.local_buf_bytes_per_pe, 307);
        s.validate().unwrap();
        r.validate().unwrap();
        let mut bad = s.clone();
        bad.local_buf_bytes_per_pe = 10;
        assert_eq!(bad.validate().unwrap_err().field, "local_buf_bytes_per_pe");
    }

    #[test]
    fn timeline_closed_form() {
        // fetch 320 B (10 cycles) + latency 5, compute 20, write 64 B (2 cycles)
        let u = Unit {
            fetch_bytes: 320,
            write_bytes: 64,
            cycles: 20,
        };
        let t = timeline(&[u], 32.0, 5);
        assert_eq!(t.cycles, 10 + 5 + 20 + 2);
        assert_eq!(t.dram_stall, 15 + 2);
        // second fetch hides under the first unit's compute
        let t = timeline(&[u, u], 32.0, 5);
        assert_eq!(t.cycles, 15 + 20 + 20 + 2);
    }
}
