//! Roofline bounds, normalized memory access, area efficiency and the
//! suite report built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::BaselineConfig;
use crate::simcore::{ArchConfig, SimResult, StatsRow};
use crate::workload::Workload;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("normalized access is undefined for a run with zero MACs")]
    ZeroMacs,
    #[error("area factor times multiplier must be positive")]
    ZeroArea,
    #[error("no runs to report")]
    Empty,
}

/// What the roofline needs to know about a machine.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roof {
    pub n_pe: usize,
    pub clock_hz: f64,
    pub dram_bytes_per_sec: f64,
}

impl From<&ArchConfig> for Roof {
    fn from(c: &ArchConfig) -> Self {
        Roof {
            n_pe: c.n_pe(),
            clock_hz: c.clock_hz,
            dram_bytes_per_sec: c.dram_bytes_per_sec,
        }
    }
}

impl From<&BaselineConfig> for Roof {
    fn from(c: &BaselineConfig) -> Self {
        Roof {
            n_pe: c.n_pe(),
            clock_hz: c.clock_hz,
            dram_bytes_per_sec: c.dram_bytes_per_sec,
        }
    }
}

impl Roof {
    pub fn compute_seconds(&self, macs: u64) -> f64 {
        macs as f64 / (self.n_pe as f64 * self.clock_hz)
    }

    pub fn memory_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / self.dram_bytes_per_sec
    }

    /// Bound in GOPS for `macs` over `bytes` of compulsory DRAM traffic.
    pub fn bound(&self, macs: u64, bytes: u64) -> f64 {
        let t = self.compute_seconds(macs).max(self.memory_seconds(bytes));
        2.0 * macs as f64 / t / 1e9
    }

    pub fn peak_gops(&self) -> f64 {
        2.0 * self.n_pe as f64 * self.clock_hz / 1e9
    }
}

/// Performance bound of `w` in GOPS: compute rate or DRAM bandwidth over
/// the unique input and output bytes, whichever is slower.
pub fn roofline(w: &Workload, roof: Roof) -> f64 {
    roof.bound(w.macs(), w.unique_bytes())
}

pub fn is_memory_bound(w: &Workload, roof: Roof) -> bool {
    roof.memory_seconds(w.unique_bytes()) > roof.compute_seconds(w.macs())
}

/// Operations per unique DRAM byte.
pub fn operational_intensity(w: &Workload) -> f64 {
    2.0 * w.macs() as f64 / w.unique_bytes() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Glb,
    Dram,
}

/// Bytes read plus written at `level` per 1000 MACs.
pub fn normalized_access(r: &SimResult, level: Level) -> Result<f64, AnalysisError> {
    if r.macs == 0 {
        return Err(AnalysisError::ZeroMacs);
    }
    let bytes = match level {
        Level::Glb => r.glb_read_bytes + r.glb_write_bytes,
        Level::Dram => r.dram_read_bytes + r.dram_write_bytes,
    };
    Ok(1000.0 * bytes as f64 / r.macs as f64)
}

/// Relative chip area by component; the area factor is their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaModel {
    pub mac: f64,
    pub global_buffer: f64,
    pub local_buffer: f64,
    pub controllers: f64,
    pub bfn_fifo: f64,
}

impl AreaModel {
    pub fn row_stationary() -> Self {
        AreaModel {
            mac: 0.08,
            global_buffer: 0.19,
            local_buffer: 0.48,
            controllers: 0.25,
            bfn_fifo: 0.0,
        }
    }

    pub fn systolic() -> Self {
        AreaModel {
            mac: 0.08,
            global_buffer: 0.38,
            local_buffer: 0.0,
            controllers: 0.0,
            bfn_fifo: 0.0,
        }
    }

    pub fn vectormesh() -> Self {
        AreaModel {
            mac: 0.08,
            global_buffer: 0.0,
            local_buffer: 0.67,
            controllers: 0.25,
            bfn_fifo: 0.04,
        }
    }

    pub fn for_arch(arch: &str) -> Option<Self> {
        match arch {
            "systolic" => Some(Self::systolic()),
            "row-stationary" => Some(Self::row_stationary()),
            "vectormesh" => Some(Self::vectormesh()),
            _ => None,
        }
    }

    pub fn factor(&self) -> f64 {
        self.mac + self.global_buffer + self.local_buffer + self.controllers + self.bfn_fifo
    }
}

/// Area multiplier relative to the 128-PE design point.
pub fn area_multiplier(n_pe: usize) -> f64 {
    n_pe as f64 / 128.0
}

pub fn area_efficiency(p_gops: f64, a: f64, n: f64) -> Result<f64, AnalysisError> {
    if !(a * n > 0.0) {
        return Err(AnalysisError::ZeroArea);
    }
    Ok(p_gops / (a * n))
}

/// One simulated cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arch: String,
    pub n_pe: usize,
    pub workload: String,
    pub gops: f64,
    pub roofline_gops: f64,
    pub memory_bound: bool,
    pub intensity: f64,
    pub utilization: f64,
    pub glb_norm: f64,
    pub dram_norm: f64,
}

impl ReportRow {
    pub fn new(w: &Workload, r: &SimResult, roof: Roof) -> Result<Self, AnalysisError> {
        Ok(ReportRow {
            arch: r.arch.clone(),
            n_pe: r.n_pe,
            workload: w.name.clone(),
            gops: r.gops(),
            roofline_gops: roofline(w, roof),
            memory_bound: is_memory_bound(w, roof),
            intensity: operational_intensity(w),
            utilization: r.utilization(),
            glb_norm: normalized_access(r, Level::Glb)?,
            dram_norm: normalized_access(r, Level::Dram)?,
        })
    }

    /// Rebuilds a row from a stats file record.
    pub fn from_stats(w: &Workload, s: &StatsRow, roof: Roof) -> Result<Self, AnalysisError> {
        if s.macs == 0 {
            return Err(AnalysisError::ZeroMacs);
        }
        let k = 1000.0 / s.macs as f64;
        let secs = s.cycles as f64 / roof.clock_hz;
        Ok(ReportRow {
            arch: s.arch.clone(),
            n_pe: s.n_pe,
            workload: s.workload.clone(),
            gops: if s.cycles == 0 {
                0.0
            } else {
                2.0 * s.macs as f64 / secs / 1e9
            },
            roofline_gops: roofline(w, roof),
            memory_bound: is_memory_bound(w, roof),
            intensity: operational_intensity(w),
            utilization: s.macs as f64 / (s.cycles.max(1) as f64 * s.n_pe as f64),
            glb_norm: k * (s.glb_read_bytes + s.glb_write_bytes) as f64,
            dram_norm: k * (s.dram_read_bytes + s.dram_write_bytes) as f64,
        })
    }
}

/// Aggregates of one (architecture, PE count) column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub arch: String,
    pub n_pe: usize,
    pub runs: usize,
    pub mean_gops: f64,
    pub geo_gops: f64,
    pub mean_glb_norm: f64,
    pub geo_glb_norm: f64,
    pub mean_dram_norm: f64,
    pub geo_dram_norm: f64,
    pub area_factor: Option<f64>,
    /// Mean GOPS over area factor times multiplier.
    pub area_efficiency: Option<f64>,
}

pub fn geo_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x.ln();
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).exp()
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    s / n as f64
}

pub fn summarize(rows: &[ReportRow]) -> Result<Vec<Summary>, AnalysisError> {
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut groups: BTreeMap<(usize, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.n_pe, r.arch.clone())).or_default().push(r);
    }
    let mut out = vec![];
    for ((n_pe, arch), g) in groups {
        let mean_gops = mean(g.iter().map(|r| r.gops));
        let area = AreaModel::for_arch(&arch).map(|a| a.factor());
        out.push(Summary {
            runs: g.len(),
            mean_gops,
            geo_gops: geo_mean(g.iter().map(|r| r.gops)),
            mean_glb_norm: mean(g.iter().map(|r| r.glb_norm)),
            geo_glb_norm: geo_mean(g.iter().map(|r| r.glb_norm)),
            mean_dram_norm: mean(g.iter().map(|r| r.dram_norm)),
            geo_dram_norm: geo_mean(g.iter().map(|r| r.dram_norm)),
            area_factor: area,
            area_efficiency: area
                .and_then(|a| area_efficiency(mean_gops, a, area_multiplier(n_pe)).ok()),
            arch,
            n_pe,
        });
    }
    Ok(out)
}

/// Geometric mean over workloads present in both columns of
/// `num / den` for a per-row metric.
pub fn paired_geo_ratio(
    rows: &[ReportRow],
    n_pe: usize,
    num: &str,
    den: &str,
    metric: impl Fn(&ReportRow) -> f64,
) -> Option<f64> {
    let pick = |arch: &str| -> BTreeMap<&str, f64> {
        rows.iter()
            .filter(|r| r.n_pe == n_pe && r.arch == arch)
            .map(|r| (r.workload.as_str(), metric(r)))
            .collect()
    };
    let (a, b) = (pick(num), pick(den));
    let ratios: Vec<f64> = a
        .iter()
        .filter_map(|(w, x)| b.get(w).map(|y| x / y))
        .collect();
    (!ratios.is_empty()).then(|| geo_mean(ratios))
}

/// Per-cell CSV with a header row.
pub fn rows_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "arch,n_pe,workload,gops,roofline_gops,memory_bound,intensity,utilization,glb_norm,dram_norm\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{},{:.4},{:.4},{:.2},{:.2}",
            r.arch,
            r.n_pe,
            r.workload,
            r.gops,
            r.roofline_gops,
            r.memory_bound,
            r.intensity,
            r.utilization,
            r.glb_norm,
            r.dram_norm
        );
    }
    s
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

/// Table with one column per (PE count, architecture) and rows for
/// normalized GLB and DRAM access, area efficiency and mean performance.
pub fn comparison_table(summaries: &[Summary]) -> String {
    let mut s = String::from("metric");
    for c in summaries {
        let _ = write!(s, ",{} {}", c.arch, c.n_pe);
    }
    s.push('\n');
    type Get = fn(&Summary) -> String;
    let lines: [(&str, Get); 8] = [
        ("glb_norm_geo", |c| format!("{:.2}", c.geo_glb_norm)),
        ("glb_norm_mean", |c| format!("{:.2}", c.mean_glb_norm)),
        ("dram_norm_geo", |c| format!("{:.2}", c.geo_dram_norm)),
        ("dram_norm_mean", |c| format!("{:.2}", c.mean_dram_norm)),
        ("area_factor", |c| opt(c.area_factor)),
        ("area_efficiency", |c| opt(c.area_efficiency)),
        ("gops_mean", |c| format!("{:.2}", c.mean_gops)),
        ("gops_geo", |c| format!("{:.2}", c.geo_gops)),
    ];
    for (name, f) in lines {
        s.push_str(name);
        for c in summaries {
            s.push(',');
            s.push_str(&f(c));
        }
        s.push('\n');
    }
    s
}

/// Roofline chart data: one `series,x,y` line per point, where `x` is
/// operations per unique DRAM byte and `y` is GOPS. Measured points are
/// in series `<arch> <pes>`, the bound in `roof <pes>`.
pub fn plot_series(rows: &[ReportRow], roofs: &[Roof]) -> String {
    let mut s = String::from("series,x,y,label\n");
    for roof in roofs {
        let ridge = roof.peak_gops() * 1e9 / roof.dram_bytes_per_sec;
        let mut x = 0.125f64;
        while x < ridge * 16.0 {
            let y = (x * roof.dram_bytes_per_sec / 1e9).min(roof.peak_gops());
            let _ = writeln!(s, "roof {},{:.4},{:.4},", roof.n_pe, x, y);
            x *= 2.0;
        }
        let _ = writeln!(
            s,
            "roof {},{:.4},{:.4},ridge",
            roof.n_pe,
            ridge,
            roof.peak_gops()
        );
    }
    for r in rows {
        let _ = writeln!(
            s,
            "{} {},{:.4},{:.4},{}",
            r.arch, r.n_pe, r.intensity, r.gops, r.workload
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::find;
    use crate::workload::make_gemm;

    fn roof(n_pe: usize) -> Roof {
        Roof::from(&ArchConfig::for_pes(n_pe).unwrap())
    }

    #[test]
    fn compute_bound_gemm_hits_peak() {
        let w = make_gemm(512, 512, 512).unwrap();
        assert!((roofline(&w, roof(128)) - 51.2).abs() < 1e-9);
        assert!(!is_memory_bound(&w, roof(128)));
    }

    #[test]
    fn pointwise_layer_memory_bound_at_512() {
        let w = find("TY CONV8").unwrap().build().unwrap();
        let g = *w.conv_geom().unwrap();
        let macs = (g.c_in * g.c_out * g.out_w * g.out_h) as f64;
        let bytes = (2 * g.c_in * g.in_w * g.in_h
            + 2 * g.c_in * g.c_out
            + 4 * g.c_out * g.out_w * g.out_h) as f64;
        let r = roof(512);
        let mem = bytes / r.dram_bytes_per_sec > macs / (512.0 * r.clock_hz);
        assert_eq!(is_memory_bound(&w, r), mem);
    }

    #[test]
    fn normalized_access_scale_invariant() {
        let mut r = SimResult::new("vectormesh", "x", 128, 2e8);
        r.macs = 2000;
        r.glb_read_bytes = 300;
        r.glb_write_bytes = 100;
        let a = normalized_access(&r, Level::Glb).unwrap();
        assert_eq!(a, 200.0);
        r.macs *= 2;
        r.glb_read_bytes *= 2;
        r.glb_write_bytes *= 2;
        assert_eq!(normalized_access(&r, Level::Glb).unwrap(), a);
        r.macs = 0;
        assert_eq!(
            normalized_access(&r, Level::Dram),
            Err(AnalysisError::ZeroMacs)
        );
    }

    #[test]
    fn area_factors_sum() {
        assert!((AreaModel::row_stationary().factor() - 1.00).abs() < 1e-9);
        assert!((AreaModel::systolic().factor() - 0.46).abs() < 1e-9);
        assert!((AreaModel::vectormesh().factor() - 1.04).abs() < 1e-9);
        assert_eq!(area_efficiency(7.5, 1.0, 1.0).unwrap(), 7.5);
        assert!((area_efficiency(10.0, 0.46, 1.0).unwrap() - 21.739).abs() < 1e-3);
        assert_eq!(area_efficiency(1.0, 0.0, 1.0), Err(AnalysisError::ZeroArea));
    }

    #[test]
    fn single_run_report() {
        let w = make_gemm(64, 64, 64).unwrap();
        let mut r = SimResult::new("vectormesh", &w.name, 128, 2e8);
        r.macs = w.macs();
        r.cycles = 4096;
        r.glb_read_bytes = 1000;
        let row = ReportRow::new(&w, &r, roof(128)).unwrap();
        let s = summarize(std::slice::from_ref(&row)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(rows_csv(&[row]).lines().count(), 2);
        assert!(comparison_table(&s).contains("vectormesh 128"));
        assert_eq!(summarize(&[]), Err(AnalysisError::Empty));
    }

    proptest::proptest! {
        #[test]
        fn roofline_monotone(macs in 1u64..1_000_000_000, bytes in 1u64..1_000_000_000, f in 1.0f64..8.0) {
            let r = roof(128);
            let faster = Roof { dram_bytes_per_sec: r.dram_bytes_per_sec * f, ..r };
            proptest::prop_assert!(faster.bound(macs, bytes) >= r.bound(macs, bytes));
            proptest::prop_assert!(r.bound(macs * 2, bytes) >= r.bound(macs, bytes));
            proptest::prop_assert!(r.bound(macs, bytes) <= r.peak_gops() * (1.0 + 1e-12));
        }
    }
}
