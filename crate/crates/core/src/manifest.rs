//! Run specifications, resolved manifests and per-run output files.
//!
//! A [`RunSpec`] is what a user writes: every field optional, unknown keys
//! rejected. Resolving it yields a [`RunManifest`] in which every
//! configuration value is explicit, so its SHA-256 pins the run. Each file
//! written for a run starts with a `# manifest-sha256: <hex>` line.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{run_baseline, BaselineConfig, BaselineKind};
use crate::catalog::{find, CatalogEntry, CatalogError};
use crate::schedule::{plan_vectormesh, AxisAssignment, SearchSpace};
use crate::simcore::{
    build_machine, run, ArchConfig, ConfigError, RunOptions, SimError, SimResult, StatsRow,
};
use crate::tensor::random_inputs;
use crate::workload::{eval_reference, Workload};

pub const SCHEMA_VERSION: u32 = 1;
pub const HASH_PREFIX: &str = "# manifest-sha256: ";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("no workload selected")]
    NoWorkload,
    #[error("`{0}` overrides do not apply to architecture `{1}`")]
    Misplaced(&'static str, &'static str),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("stats file: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Vectormesh,
    Systolic,
    RowStationary,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [
        ArchKind::Systolic,
        ArchKind::RowStationary,
        ArchKind::Vectormesh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Vectormesh => "vectormesh",
            ArchKind::Systolic => "systolic",
            ArchKind::RowStationary => "row-stationary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
    }

    fn baseline(self) -> Option<BaselineKind> {
        match self {
            ArchKind::Vectormesh => None,
            ArchKind::Systolic => Some(BaselineKind::Systolic),
            ArchKind::RowStationary => Some(BaselineKind::RowStationary),
        }
    }
}

/// Partial VectorMesh configuration; missing fields keep the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchPatch {
    pub mesh_rows: Option<usize>,
    pub mesh_cols: Option<usize>,
    pub pes_per_teu: Option<usize>,
    pub input_buf_bytes: Option<u64>,
    pub psum_buf_bytes: Option<u64>,
    pub fifo_depth_entries: Option<usize>,
    pub fifo_entry_words: Option<usize>,
    pub glb_bytes: Option<u64>,
    pub clock_hz: Option<f64>,
    pub dram_bytes_per_sec: Option<f64>,
    pub glb_bytes_per_sec: Option<f64>,
    pub dram_latency_cycles: Option<u64>,
}

macro_rules! patch {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if let Some(v) = $src.$f { $dst.$f = v; } )*
    };
}

impl ArchPatch {
    pub fn apply(&self, mut c: ArchConfig) -> ArchConfig {
        patch!(
            c,
            self,
            mesh_rows,
            mesh_cols,
            pes_per_teu,
            input_buf_bytes,
            psum_buf_bytes,
            fifo_depth_entries,
            fifo_entry_words,
            glb_bytes,
            clock_hz,
            dram_bytes_per_sec,
            glb_bytes_per_sec,
            dram_latency_cycles
        );
        c
    }
}

/// Partial baseline configuration; missing fields keep the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinePatch {
    pub pe_rows: Option<usize>,
    pub pe_cols: Option<usize>,
    pub local_buf_bytes_per_pe: Option<u64>,
    pub glb_bytes: Option<u64>,
    pub clock_hz: Option<f64>,
    pub dram_bytes_per_sec: Option<f64>,
    pub glb_bytes_per_sec: Option<f64>,
    pub dram_latency_cycles: Option<u64>,
}

impl BaselinePatch {
    pub fn apply(&self, mut c: BaselineConfig) -> BaselineConfig {
        patch!(
            c,
            self,
            pe_rows,
            pe_cols,
            local_buf_bytes_per_pe,
            glb_bytes,
            clock_hz,
            dram_bytes_per_sec,
            glb_bytes_per_sec,
            dram_latency_cycles
        );
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverride {
    /// Per-TEU tile extents, one per NDRange index.
    pub tile: Option<Vec<usize>>,
    /// Parallel indices spread over mesh rows and columns.
    pub assignment: Option<AxisAssignment>,
    pub space: Option<SearchSpace>,
}

impl ScheduleOverride {
    fn is_empty(&self) -> bool {
        self.tile.is_none() && self.assignment.is_none() && self.space.is_none()
    }
}

/// Sweep matrix: every architecture × PE count × workload.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub archs: Option<Vec<ArchKind>>,
    pub pes: Option<Vec<usize>>,
    /// Catalog names, or `suite:<name>` for a whole suite.
    pub workloads: Option<Vec<String>>,
}

/// User-facing configuration file. Command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub schema: u32,
    pub arch: Option<ArchKind>,
    pub pes: Option<usize>,
    /// Catalog name.
    pub workload: Option<String>,
    /// Inline layer parameters, used when no name is given.
    pub layer: Option<CatalogEntry>,
    /// Replaces the input feature-map width and height of conv layers.
    pub spatial: Option<usize>,
    pub seed: Option<u64>,
    pub functional: Option<bool>,
    pub vectormesh: Option<ArchPatch>,
    pub baseline: Option<BaselinePatch>,
    pub schedule: Option<ScheduleOverride>,
    pub sweep: Option<SweepSpec>,
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let s: RunSpec = toml::from_str(text)?;
        if s.schema != SCHEMA_VERSION {
            return Err(ManifestError::Schema(s.schema));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn new() -> Self {
        RunSpec {
            schema: SCHEMA_VERSION,
            ..Default::default()
        }
    }

    /// Catalog entry selected by name (`workload`) or inline (`layer`).
    pub fn entry(&self, name: Option<&str>) -> Result<CatalogEntry, ManifestError> {
        let e = match (name.or(self.workload.as_deref()), &self.layer) {
            (Some(n), _) => find(n)?,
            (None, Some(l)) => l.clone(),
            (None, None) => return Err(ManifestError::NoWorkload),
        };
        Ok(match self.spatial {
            Some(s) => e.at_spatial(s),
            None => e,
        })
    }

    /// Fully explicit manifest for one cell.
    pub fn resolve(
        &self,
        arch: ArchKind,
        pes: usize,
        entry: CatalogEntry,
    ) -> Result<RunManifest, ManifestError> {
        let schedule = self.schedule.clone().unwrap_or_default();
        let (vectormesh, baseline) = match arch.baseline() {
            None => {
                if self.baseline.is_some() {
                    return Err(ManifestError::Misplaced("baseline", arch.name()));
                }
                let c = self
                    .vectormesh
                    .clone()
                    .unwrap_or_default()
                    .apply(ArchConfig::for_pes(pes)?);
                c.validate()?;
                (Some(c), None)
            }
            Some(kind) => {
                if self.vectormesh.is_some() {
                    return Err(ManifestError::Misplaced("vectormesh", arch.name()));
                }
                if !schedule.is_empty() {
                    return Err(ManifestError::Misplaced("schedule", arch.name()));
                }
                let c = self
                    .baseline
                    .clone()
                    .unwrap_or_default()
                    .apply(BaselineConfig::for_kind(kind, pes)?);
                c.validate()?;
                (None, Some(c))
            }
        };
        Ok(RunManifest {
            schema: SCHEMA_VERSION,
            arch,
            workload: entry,
            seed: self.seed.unwrap_or(0),
            functional: self.functional.unwrap_or(true),
            vectormesh,
            baseline,
            schedule,
        })
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: u32,
    pub arch: ArchKind,
    pub seed: u64,
    pub functional: bool,
    pub workload: CatalogEntry,
    pub vectormesh: Option<ArchConfig>,
    pub baseline: Option<BaselineConfig>,
    pub schedule: ScheduleOverride,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let m: RunManifest = toml::from_str(text)?;
        if m.schema != SCHEMA_VERSION {
            return Err(ManifestError::Schema(m.schema));
        }
        Ok(m)
    }

    pub fn hash(&self) -> String {
        hash_text(&self.to_toml())
    }

    pub fn n_pe(&self) -> usize {
        match (&self.vectormesh, &self.baseline) {
            (Some(c), _) => c.n_pe(),
            (_, Some(b)) => b.n_pe(),
            _ => 0,
        }
    }

    /// Directory-safe cell name.
    pub fn slug(&self) -> String {
        let w: String = self
            .workload
            .name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '_'
                }
            })
            .collect();
        format!("{}-{}-{}", self.arch.name(), self.n_pe(), w)
    }
}

/// A completed cell.
#[derive(Debug)]
pub struct CellOutcome {
    pub workload: Workload,
    pub result: SimResult,
    /// Whether the output matched the reference, when checked.
    pub verified: Option<bool>,
}

/// Runs one manifest. `trace` receives VectorMesh cycle events.
pub fn run_cell(
    m: &RunManifest,
    verify: bool,
    trace: Option<Box<dyn Write>>,
) -> Result<CellOutcome, SimError> {
    let w = m.workload.build()?;
    let inputs = if m.functional {
        random_inputs(&w, m.seed).to_vec()
    } else {
        vec![]
    };
    let result = match (&m.vectormesh, &m.baseline) {
        (Some(cfg), _) => {
            cfg.validate()?;
            let mut req = cfg.plan_request();
            req.tile = m.schedule.tile.clone();
            req.assignment = m.schedule.assignment;
            if let Some(s) = m.schedule.space {
                req.space = s;
            }
            let plan = plan_vectormesh(&w, &req)?;
            let mut machine = build_machine(cfg)?;
            let mut opts = if m.functional {
                RunOptions::functional()
            } else {
                RunOptions::timing()
            };
            opts.trace = trace;
            run(&mut machine, &w, &plan, &inputs, opts)?
        }
        (_, Some(b)) => run_baseline(b, &w, m.functional.then_some(&inputs[..]))?,
        _ => {
            return Err(SimError::Unsupported(
                "manifest names no configuration".into(),
            ))
        }
    };
    let verified = match (&result.output, verify) {
        (Some(out), true) => Some(*out == eval_reference(&w, &inputs)?),
        _ => None,
    };
    Ok(CellOutcome {
        workload: w,
        result,
        verified,
    })
}

/// Hex SHA-256 of `text`.
pub fn hash_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Writes `text` behind the hash line.
pub fn write_with_hash(path: &Path, hash: &str, text: &str) -> Result<(), ManifestError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{HASH_PREFIX}{hash}")?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Stats CSV body (header plus rows), without the hash line.
pub fn stats_csv(rows: &[StatsRow]) -> Result<String, ManifestError> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Reads a stats file, returning its hash and rows.
pub fn read_stats(path: &Path) -> Result<(String, Vec<StatsRow>), ManifestError> {
    let text = std::fs::read_to_string(path)?;
    let (hash, body) = split_hash(&text);
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let rows = rdr.deserialize().collect::<Result<Vec<StatsRow>, _>>()?;
    Ok((hash, rows))
}

/// Splits off a leading hash line, if any.
pub fn split_hash(text: &str) -> (String, &str) {
    match text.strip_prefix(HASH_PREFIX) {
        Some(rest) => {
            let (h, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (h.trim().to_string(), body)
        }
        None => (String::new(), text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunSpec::parse("schema = 1\narch = \"systolic\"\n").is_ok());
        assert!(matches!(
            RunSpec::parse("schema = 1\nbogus = 3\n"),
            Err(ManifestError::Parse(_))
        ));
        assert!(matches!(
            RunSpec::parse("schema = 1\n[vectormesh]\nglb_kb = 3\n"),
            Err(ManifestError::Parse(_))
        ));
        assert!(matches!(
            RunSpec::parse("schema = 7\n"),
            Err(ManifestError::Schema(7))
        ));
    }

    #[test]
    fn resolve_and_round_trip() {
        let spec = RunSpec::parse(
            "schema = 1\nworkload = \"MM 256\"\nseed = 4\n[vectormesh]\nglb_bytes = 4096\n",
        )
        .unwrap();
        let e = spec.entry(None).unwrap();
        let m = spec.resolve(ArchKind::Vectormesh, 512, e).unwrap();
        let vm = m.vectormesh.as_ref().unwrap();
        assert_eq!((vm.mesh_rows, vm.mesh_cols, vm.glb_bytes), (4, 4, 4096));
        let back = RunManifest::parse(&m.to_toml()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
        assert_eq!(m.slug(), "vectormesh-512-mm_256");
        let other = RunSpec {
            seed: Some(5),
            ..spec.clone()
        };
        let e = other.entry(None).unwrap();
        assert_ne!(
            other.resolve(ArchKind::Vectormesh, 512, e).unwrap().hash(),
            m.hash()
        );
    }

    #[test]
    fn misplaced_overrides() {
        let spec = RunSpec::parse("schema = 1\n[vectormesh]\nglb_bytes = 4096\n").unwrap();
        let e = find("MM 256").unwrap();
        assert!(matches!(
            spec.resolve(ArchKind::Systolic, 128, e.clone()),
            Err(ManifestError::Misplaced("vectormesh", "systolic"))
        ));
        let bad = RunSpec::parse("schema = 1\n[vectormesh]\nmesh_cols = 0\n").unwrap();
        assert!(matches!(
            bad.resolve(ArchKind::Vectormesh, 128, e),
            Err(ManifestError::Config(_))
        ));
    }

    #[test]
    fn stats_round_trip() {
        let spec = RunSpec {
            functional: Some(true),
            ..RunSpec::new()
        };
        let m = spec
            .resolve(
                ArchKind::RowStationary,
                128,
                find("TY CONV2").unwrap().at_spatial(10),
            )
            .unwrap();
        let out = run_cell(&m, true, None).unwrap();
        assert_eq!(out.verified, Some(true));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        write_with_hash(&p, &m.hash(), &stats_csv(&[out.result.stats()]).unwrap()).unwrap();
        let (h, rows) = read_stats(&p).unwrap();
        assert_eq!(h, m.hash());
        assert_eq!(rows, vec![out.result.stats()]);
    }
}
