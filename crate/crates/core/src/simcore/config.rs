use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{BufferBudget, PlanRequest, SearchSpace};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid configuration field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    pub pes_per_teu: usize,
    /// Both input buffers together.
    pub input_buf_bytes: u64,
    pub psum_buf_bytes: u64,
    pub fifo_depth_entries: usize,
    pub fifo_entry_words: usize,
    pub glb_bytes: u64,
    pub clock_hz: f64,
    pub dram_bytes_per_sec: f64,
    pub glb_bytes_per_sec: f64,
    pub dram_latency_cycles: u64,
    pub word_bytes: u64,
    pub psum_bytes: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::vectormesh_128()
    }
}

impl ArchConfig {
    pub fn vectormesh_128() -> Self {
        ArchConfig {
            mesh_rows: 2,
            mesh_cols: 2,
            pes_per_teu: 32,
            input_buf_bytes: 16384,
            psum_buf_bytes: 5120,
            fifo_depth_entries: 4,
            fifo_entry_words: 32,
            glb_bytes: 2048,
            clock_hz: 2.0e8,
            dram_bytes_per_sec: 6.4e9,
            glb_bytes_per_sec: 2.56e10,
            dram_latency_cycles: 100,
            word_bytes: 2,
            psum_bytes: 4,
        }
    }

    pub fn vectormesh_512() -> Self {
        ArchConfig {
            mesh_rows: 4,
            mesh_cols: 4,
            ..Self::vectormesh_128()
        }
    }

    /// Square-ish mesh for a PE count (128 → 2×2, 512 → 4×4).
    pub fn for_pes(n_pe: usize) -> Result<Self, ConfigError> {
        let teus = n_pe / 32;
        if teus == 0 || n_pe % 32 != 0 {
            return Err(ConfigError::new(
                "pes",
                format!("{n_pe} is not a multiple of 32"),
            ));
        }
        let mut rows = (teus as f64).sqrt() as usize;
        while teus % rows != 0 {
            rows -= 1;
        }
        Ok(ArchConfig {
            mesh_rows: rows,
            mesh_cols: teus / rows,
            ..Self::vectormesh_128()
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.mesh_rows == 0 {
            return Err(ConfigError::new("mesh_rows", "must be positive"));
        }
        if self.mesh_cols == 0 {
            return Err(ConfigError::new("mesh_cols", "must be positive"));
        }
        if self.pes_per_teu != 32 {
            return Err(ConfigError::new("pes_per_teu", "must be 32 (2^5 lanes)"));
        }
        if self.fifo_entry_words != self.pes_per_teu {
            return Err(ConfigError::new(
                "fifo_entry_words",
                "must equal pes_per_teu (one vector per entry)",
            ));
        }
        let positive: [(&'static str, f64); 9] = [
            ("input_buf_bytes", self.input_buf_bytes as f64),
            ("psum_buf_bytes", self.psum_buf_bytes as f64),
            ("fifo_depth_entries", self.fifo_depth_entries as f64),
            ("glb_bytes", self.glb_bytes as f64),
            ("clock_hz", self.clock_hz),
            ("dram_bytes_per_sec", self.dram_bytes_per_sec),
            ("glb_bytes_per_sec", self.glb_bytes_per_sec),
            ("word_bytes", self.word_bytes as f64),
            ("psum_bytes", self.psum_bytes as f64),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::new(field, "must be positive"));
            }
        }
        if self.word_bytes != 2 || self.psum_bytes != 4 {
            return Err(ConfigError::new(
                "word_bytes",
                "the functional model stores 2-byte words and 4-byte psums",
            ));
        }
        if self.psum_words() < self.pes_per_teu as u64 {
            return Err(ConfigError::new(
                "psum_buf_bytes",
                "smaller than one lane group",
            ));
        }
        if self.operand_half_words() == 0 {
            return Err(ConfigError::new(
                "input_buf_bytes",
                "too small to double-buffer",
            ));
        }
        if self.glb_bytes < self.psum_bytes * self.pes_per_teu as u64 {
            return Err(ConfigError::new(
                "glb_bytes",
                "smaller than one drained PSum vector",
            ));
        }
        if self.dram_bytes_per_cycle() < 1.0 || self.glb_bytes_per_cycle() < 1.0 {
            return Err(ConfigError::new(
                "dram_bytes_per_sec",
                "rates below one byte per cycle are not modeled",
            ));
        }
        Ok(())
    }

    pub fn teus(&self) -> usize {
        self.mesh_rows * self.mesh_cols
    }

    pub fn n_pe(&self) -> usize {
        self.teus() * self.pes_per_teu
    }

    pub fn x_bits(&self) -> u32 {
        self.pes_per_teu.trailing_zeros()
    }

    pub fn dram_bytes_per_cycle(&self) -> f64 {
        self.dram_bytes_per_sec / self.clock_hz
    }

    pub fn glb_bytes_per_cycle(&self) -> f64 {
        self.glb_bytes_per_sec / self.clock_hz
    }

    /// Words in one operand's buffer (one of the two input buffers).
    pub fn operand_buffer_words(&self) -> u64 {
        self.input_buf_bytes / 2 / self.word_bytes
    }

    /// Words in one prefetch half of an operand buffer.
    pub fn operand_half_words(&self) -> u64 {
        self.operand_buffer_words() / 2
    }

    pub fn psum_words(&self) -> u64 {
        self.psum_buf_bytes / self.psum_bytes
    }

    pub fn budget(&self) -> BufferBudget {
        BufferBudget {
            input_words: 2 * self.operand_half_words(),
            psum_words: self.psum_words(),
            per_operand_words: Some(self.operand_half_words()),
        }
    }

    pub fn plan_request(&self) -> PlanRequest {
        PlanRequest {
            mesh: (self.mesh_rows, self.mesh_cols),
            budget: self.budget(),
            x_bits: self.x_bits(),
            word_bytes: self.word_bytes,
            psum_bytes: self.psum_bytes,
            dram_bytes_per_cycle: self.dram_bytes_per_cycle(),
            glb_bytes_per_cycle: self.glb_bytes_per_cycle(),
            dram_latency_cycles: self.dram_latency_cycles,
            space: SearchSpace::Restricted,
            tile: None,
            assignment: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let a = ArchConfig::vectormesh_128();
        a.validate().unwrap();
        assert_eq!(a.n_pe(), 128);
        assert_eq!(ArchConfig::vectormesh_512().n_pe(), 512);
        assert_eq!(a.dram_bytes_per_cycle(), 32.0);
        assert_eq!(a.glb_bytes_per_cycle(), 128.0);
        assert_eq!(a.operand_buffer_words(), 4096);
        assert_eq!(a.psum_words(), 1280);
        assert_eq!(
            ArchConfig::for_pes(512).unwrap(),
            ArchConfig::vectormesh_512()
        );
    }

    #[test]
    fn field_diagnosis() {
        let mut a = ArchConfig::vectormesh_128();
        a.pes_per_teu = 16;
        assert_eq!(a.validate().unwrap_err().field, "pes_per_teu");
        let mut a = ArchConfig::vectormesh_128();
        a.clock_hz = 0.0;
        assert_eq!(a.validate().unwrap_err().field, "clock_hz");
        let mut a = ArchConfig::vectormesh_128();
        a.mesh_cols = 0;
        assert_eq!(a.validate().unwrap_err().field, "mesh_cols");
    }
}
