//! `vmesh`: list workloads, print schedules, run simulations and sweeps.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 unsupported workload, 4 internal assertion (bank conflict, deadlock,
//! wrong output).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use vmesh::analysis::{
    comparison_table, paired_geo_ratio, plot_series, rows_csv, summarize, ReportRow, Roof,
};
use vmesh::catalog::{catalog, filter, CatalogEntry, CatalogError, LayerKind, Suite};
use vmesh::manifest::{
    hash_text, read_stats, run_cell, split_hash, stats_csv, write_with_hash, ArchKind,
    ManifestError, RunManifest, RunSpec,
};
use vmesh::schedule::{plan_vectormesh, ScheduleError};
use vmesh::simcore::{ConfigError, SimError};
use vmesh::workload::WorkloadError;

#[derive(Parser)]
#[command(
    name = "vmesh",
    version,
    about = "Mesh accelerator simulator with systolic and row-stationary references"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug, Default)]
struct Select {
    /// TOML run specification.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vectormesh, systolic or row-stationary.
    #[arg(long)]
    arch: Option<String>,
    /// Catalog name, e.g. "AL CONV3".
    #[arg(long, conflicts_with = "gemm")]
    workload: Option<String>,
    /// Ad-hoc GEMM given as M,N,K.
    #[arg(long, value_delimiter = ',', value_name = "M,N,K")]
    gemm: Option<Vec<usize>>,
    #[arg(long)]
    pes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input feature-map width and height for conv layers.
    #[arg(long)]
    spatial: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the workload catalog.
    ListWorkloads {
        /// Case-insensitive name filter.
        pattern: Option<String>,
        #[arg(long)]
        suite: Option<String>,
    },
    /// Print the tile scheme, sharing plan and TEU program for one workload.
    Schedule {
        #[command(flatten)]
        sel: Select,
        /// Explicit per-TEU tile extents, comma separated.
        #[arg(long, value_delimiter = ',')]
        tile: Option<Vec<usize>>,
    },
    /// Run one workload on one architecture.
    Simulate {
        #[command(flatten)]
        sel: Select,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Record per-cycle events (vectormesh only).
        #[arg(long)]
        trace: bool,
        /// Model timing and traffic only, without computing values.
        #[arg(long)]
        timing_only: bool,
        /// Compare the output against the reference evaluator.
        #[arg(long)]
        verify: bool,
    },
    /// Run every architecture × PE count × workload cell and report.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architectures, comma separated (default: all three).
        #[arg(long, value_delimiter = ',')]
        arch: Option<Vec<String>>,
        /// Names or `suite:<classic|modern|matching|gemm>` (default: suite:classic).
        #[arg(long, value_delimiter = ',')]
        workload: Option<Vec<String>>,
        /// PE counts (default: 128,512).
        #[arg(long, value_delimiter = ',')]
        pes: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        spatial: Option<usize>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        timing_only: bool,
        #[arg(long)]
        verify: bool,
    },
    /// Rebuild the report of a sweep directory.
    Report {
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

#[derive(Debug)]
struct OutputMismatch(String);

impl std::fmt::Display for OutputMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "simulated output differs from the reference for `{}`",
            self.0
        )
    }
}

impl std::error::Error for OutputMismatch {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(m) = cause.downcast_ref::<ManifestError>() {
            return match m {
                ManifestError::Io(_) | ManifestError::Csv(_) => 1,
                _ => 2,
            };
        }
        if let Some(s) = cause.downcast_ref::<SimError>() {
            return match s {
                SimError::Config(_) | SimError::Schedule(_) | SimError::Workload(_) => 2,
                SimError::Unsupported(_) => 3,
                SimError::Bank { .. } | SimError::Deadlock { .. } | SimError::PlanMismatch(_) => 4,
            };
        }
        if cause.is::<ScheduleError>()
            || cause.is::<ConfigError>()
            || cause.is::<CatalogError>()
            || cause.is::<WorkloadError>()
        {
            return 2;
        }
        if cause.is::<OutputMismatch>() {
            return 4;
        }
    }
    1
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::ListWorkloads { pattern, suite } => {
            list_workloads(pattern.as_deref(), suite.as_deref())
        }
        Cmd::Schedule { sel, tile } => schedule(&sel, tile),
        Cmd::Simulate {
            sel,
            out,
            trace,
            timing_only,
            verify,
        } => simulate(&sel, &out, trace, timing_only, verify),
        Cmd::Sweep {
            config,
            arch,
            workload,
            pes,
            seed,
            spatial,
            out,
            workers,
            timing_only,
            verify,
        } => sweep(SweepArgs {
            config,
            arch,
            workload,
            pes,
            seed,
            spatial,
            out,
            workers,
            timing_only,
            verify,
        }),
        Cmd::Report { out } => report(&out).map(|_| ()),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn suite_of(name: &str) -> Option<Suite> {
    match name.to_ascii_lowercase().as_str() {
        "classic" => Some(Suite::Classic),
        "modern" => Some(Suite::Modern),
        "matching" => Some(Suite::Matching),
        "gemm" => Some(Suite::Gemm),
        _ => None,
    }
}

fn list_workloads(pattern: Option<&str>, suite: Option<&str>) -> Result<()> {
    let mut entries = catalog();
    if let Some(s) = suite {
        let s =
            suite_of(s).ok_or_else(|| ConfigError::new("suite", format!("unknown suite `{s}`")))?;
        entries.retain(|e| e.suite == s);
    }
    if let Some(p) = pattern {
        entries = filter(&entries, p);
    }
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{:<16} {:<12} {:<9} {:>6} {:>7} {:>6} {:>6} {:>9}",
        "name", "kind", "suite", "stride", "kernel", "c_in", "c_out", "input"
    )?;
    for e in &entries {
        let kind = format!("{:?}", e.kind).to_ascii_lowercase();
        let suite = format!("{:?}", e.suite).to_ascii_lowercase();
        let (kernel, input) = match e.kind {
            LayerKind::Gemm => ("-".to_string(), format!("{}x{}x{}", e.m, e.n, e.k)),
            LayerKind::Correlation => (
                format!("{}x{}", e.disp_w, e.disp_h),
                format!("{}x{}", e.in_w, e.in_h),
            ),
            _ => (
                format!("{}x{}", e.k_w, e.k_h),
                format!("{}x{}", e.in_w, e.in_h),
            ),
        };
        let stride = if e.kind == LayerKind::Gemm {
            "-".to_string()
        } else {
            e.stride.to_string()
        };
        writeln!(
            out,
            "{:<16} {:<12} {:<9} {:>6} {:>7} {:>6} {:>6} {:>9}",
            e.name, kind, suite, stride, kernel, e.c_in, e.c_out, input
        )?;
    }
    Ok(())
}

fn parse_arch(s: &str) -> Result<ArchKind> {
    ArchKind::parse(s).ok_or_else(|| {
        anyhow!(ConfigError::new(
            "arch",
            format!("unknown architecture `{s}`")
        ))
    })
}

/// Spec from `--config` with the single-run flags applied.
fn load_spec(sel: &Select) -> Result<(RunSpec, ArchKind, usize, CatalogEntry)> {
    let mut spec = match &sel.config {
        Some(p) => RunSpec::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunSpec::new(),
    };
    if sel.seed.is_some() {
        spec.seed = sel.seed;
    }
    if sel.spatial.is_some() {
        spec.spatial = sel.spatial;
    }
    let arch = match &sel.arch {
        Some(a) => parse_arch(a)?,
        None => spec.arch.unwrap_or(ArchKind::Vectormesh),
    };
    let pes = sel.pes.or(spec.pes).unwrap_or(128);
    let entry = match sel.gemm.as_deref() {
        Some(&[m, n, k]) => CatalogEntry::custom_gemm(m, n, k),
        Some(_) => bail!(ConfigError::new("gemm", "expected M,N,K")),
        None => spec.entry(sel.workload.as_deref())?,
    };
    Ok((spec, arch, pes, entry))
}

fn schedule(sel: &Select, tile: Option<Vec<usize>>) -> Result<()> {
    let (mut spec, arch, pes, entry) = load_spec(sel)?;
    if arch != ArchKind::Vectormesh {
        bail!(ConfigError::new(
            "arch",
            "schedules are only produced for vectormesh"
        ));
    }
    if tile.is_some() {
        spec.schedule.get_or_insert_with(Default::default).tile = tile;
    }
    let m = spec.resolve(arch, pes, entry)?;
    let w = m.workload.build()?;
    let cfg = m.vectormesh.as_ref().expect("vectormesh manifest");
    let mut req = cfg.plan_request();
    req.tile = m.schedule.tile.clone();
    req.assignment = m.schedule.assignment;
    if let Some(s) = m.schedule.space {
        req.space = s;
    }
    let plan = plan_vectormesh(&w, &req).map_err(SimError::from)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "workload = {:?}", w.name)?;
    writeln!(out, "ndrange = {:?}", w.extents())?;
    writeln!(out, "mesh = \"{}x{}\"", cfg.mesh_rows, cfg.mesh_cols)?;
    writeln!(out, "tile = {:?}", plan.scheme.extents)?;
    writeln!(
        out,
        "bandwidth_per_mac = \"{}\"",
        plan.scheme.bandwidth_per_mac
    )?;
    writeln!(out)?;
    write!(out, "{}", plan.to_text())?;
    Ok(())
}

fn simulate(sel: &Select, out: &Path, trace: bool, timing_only: bool, verify: bool) -> Result<()> {
    let (mut spec, arch, pes, entry) = load_spec(sel)?;
    if timing_only {
        spec.functional = Some(false);
    }
    let m = spec.resolve(arch, pes, entry)?;
    let hash = m.hash();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_with_hash(&out.join("manifest.toml"), &hash, &m.to_toml())?;
    let sink: Option<Box<dyn Write>> = match (trace, arch) {
        (false, _) => None,
        (true, ArchKind::Vectormesh) => {
            let mut f = BufWriter::new(fs::File::create(out.join("trace.csv"))?);
            writeln!(f, "{}{hash}", vmesh::manifest::HASH_PREFIX)?;
            Some(Box::new(f))
        }
        (true, _) => {
            eprintln!("note: cycle traces are recorded for vectormesh only");
            None
        }
    };
    let cell = run_cell(&m, verify, sink)?;
    if cell.verified == Some(false) {
        bail!(OutputMismatch(cell.workload.name.clone()));
    }
    let r = &cell.result;
    write_with_hash(&out.join("stats.csv"), &hash, &stats_csv(&[r.stats()])?)?;
    let row = ReportRow::new(&cell.workload, r, roof_of(&m))?;
    let mut so = std::io::stdout().lock();
    writeln!(so, "manifest-sha256 = {hash}")?;
    writeln!(so, "{} {} PEs, {}", m.arch.name(), r.n_pe, r.workload)?;
    writeln!(so, "cycles          {}", r.cycles)?;
    writeln!(
        so,
        "GOPS            {:.3} (roofline {:.3})",
        row.gops, row.roofline_gops
    )?;
    writeln!(so, "utilization     {:.4}", row.utilization)?;
    writeln!(so, "GLB  B/kMAC     {:.2}", row.glb_norm)?;
    writeln!(so, "DRAM B/kMAC     {:.2}", row.dram_norm)?;
    if let Some(v) = cell.verified {
        writeln!(so, "verified        {v}")?;
    }
    Ok(())
}

fn roof_of(m: &RunManifest) -> Roof {
    match (&m.vectormesh, &m.baseline) {
        (Some(c), _) => Roof::from(c),
        (_, Some(b)) => Roof::from(b),
        _ => unreachable!("resolved manifests carry a configuration"),
    }
}

struct SweepArgs {
    config: Option<PathBuf>,
    arch: Option<Vec<String>>,
    workload: Option<Vec<String>>,
    pes: Option<Vec<usize>>,
    seed: Option<u64>,
    spatial: Option<usize>,
    out: PathBuf,
    workers: usize,
    timing_only: bool,
    verify: bool,
}

fn expand_workloads(names: &[String], spec: &RunSpec) -> Result<Vec<CatalogEntry>> {
    let mut v = vec![];
    for n in names {
        if let Some(s) = n.strip_prefix("suite:") {
            let s = suite_of(s)
                .ok_or_else(|| ConfigError::new("workloads", format!("unknown suite `{s}`")))?;
            v.extend(catalog().into_iter().filter(|e| e.suite == s));
        } else if n.eq_ignore_ascii_case("all") {
            v.extend(catalog());
        } else {
            v.push(vmesh::catalog::find(n)?);
        }
    }
    Ok(match spec.spatial {
        Some(s) => v.into_iter().map(|e| e.at_spatial(s)).collect(),
        None => v,
    })
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => RunSpec::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunSpec::new(),
    };
    if a.seed.is_some() {
        spec.seed = a.seed;
    }
    if a.spatial.is_some() {
        spec.spatial = a.spatial;
    }
    if a.timing_only {
        spec.functional = Some(false);
    }
    let sw = spec.sweep.clone().unwrap_or_default();
    let archs: Vec<ArchKind> = match &a.arch {
        Some(v) => v.iter().map(|s| parse_arch(s)).collect::<Result<_>>()?,
        None => sw.archs.clone().unwrap_or_else(|| ArchKind::ALL.to_vec()),
    };
    let pes = a
        .pes
        .clone()
        .or(sw.pes.clone())
        .unwrap_or_else(|| vec![128, 512]);
    let names = a
        .workload
        .clone()
        .or(sw.workloads.clone())
        .unwrap_or_else(|| vec!["suite:classic".into()]);
    let entries = expand_workloads(&names, &spec)?;

    let mut cells = vec![];
    for &p in &pes {
        for &arch in &archs {
            for e in &entries {
                cells.push(spec.resolve(arch, p, e.clone())?);
            }
        }
    }
    let root = a.out.join("cells");
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.max(1))
        .build()
        .map_err(|e| anyhow!("thread pool: {e}"))?;
    let verify = a.verify;
    let outcomes: Vec<Result<String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|m| -> Result<String> {
                let dir = root.join(m.slug());
                fs::create_dir_all(&dir)?;
                let hash = m.hash();
                write_with_hash(&dir.join("manifest.toml"), &hash, &m.to_toml())?;
                let _ = fs::remove_file(dir.join("error.txt"));
                let res = run_cell(m, verify, None)
                    .map_err(anyhow::Error::from)
                    .and_then(|c| {
                        if c.verified == Some(false) {
                            Err(anyhow!(OutputMismatch(c.workload.name.clone())))
                        } else {
                            Ok(c)
                        }
                    });
                match res {
                    Ok(c) => {
                        write_with_hash(
                            &dir.join("stats.csv"),
                            &hash,
                            &stats_csv(&[c.result.stats()])?,
                        )?;
                        Ok(format!("ok   {}", m.slug()))
                    }
                    Err(e) => {
                        let _ = fs::remove_file(dir.join("stats.csv"));
                        write_with_hash(&dir.join("error.txt"), &hash, &format!("{e:#}\n"))?;
                        Ok(format!("fail {} ({e:#})", m.slug()))
                    }
                }
            })
            .collect()
    });
    for o in outcomes {
        eprintln!("{}", o?);
    }
    let table = report(&a.out)?;
    write!(std::io::stdout().lock(), "{table}")?;
    Ok(())
}

/// Reads every cell under `out/cells` and writes `report.csv`,
/// `table.csv`, `roofline.csv` and `failures.csv` into `out`.
fn report(out: &Path) -> Result<String> {
    let root = out.join("cells");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut rows = vec![];
    let mut failures = String::from("cell,error\n");
    let mut hashes = vec![];
    let mut roofs: Vec<Roof> = vec![];
    for d in &dirs {
        let text = fs::read_to_string(d.join("manifest.toml"))
            .with_context(|| format!("reading {}", d.join("manifest.toml").display()))?;
        let (hash, body) = split_hash(&text);
        let m = RunManifest::parse(body)?;
        if m.hash() != hash {
            bail!("{}: manifest does not match its recorded hash", d.display());
        }
        hashes.push(hash.clone());
        let slug = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let stats = d.join("stats.csv");
        if !stats.exists() {
            let err = fs::read_to_string(d.join("error.txt")).unwrap_or_default();
            let (_, msg) = split_hash(&err);
            failures.push_str(&format!("{slug},\"{}\"\n", msg.trim().replace('"', "'")));
            continue;
        }
        let (shash, srows) = read_stats(&stats)?;
        if shash != hash {
            bail!("{}: stats file hash differs from the manifest", d.display());
        }
        let w = m.workload.build()?;
        let roof = roof_of(&m);
        if !roofs.iter().any(|r| r.n_pe == roof.n_pe) {
            roofs.push(roof);
        }
        for s in &srows {
            rows.push(ReportRow::from_stats(&w, s, roof)?);
        }
    }
    hashes.sort();
    let sweep_hash = hash_text(&hashes.join("\n"));
    write_with_hash(&out.join("report.csv"), &sweep_hash, &rows_csv(&rows))?;
    write_with_hash(&out.join("failures.csv"), &sweep_hash, &failures)?;
    roofs.sort_by_key(|r| r.n_pe);
    write_with_hash(
        &out.join("roofline.csv"),
        &sweep_hash,
        &plot_series(&rows, &roofs),
    )?;
    if rows.is_empty() {
        return Ok("no completed cells\n".into());
    }
    let summaries = summarize(&rows)?;
    let mut table = comparison_table(&summaries);
    for r in &roofs {
        for (num, den) in [("systolic", "vectormesh"), ("row-stationary", "vectormesh")] {
            let g = paired_geo_ratio(&rows, r.n_pe, num, den, |x| x.glb_norm);
            let d = paired_geo_ratio(&rows, r.n_pe, num, den, |x| x.dram_norm);
            if let (Some(g), Some(d)) = (g, d) {
                table.push_str(&format!(
                    "ratio {num}/{den} {} glb {g:.2} dram {d:.2}\n",
                    r.n_pe
                ));
            }
        }
    }
    write_with_hash(&out.join("table.csv"), &sweep_hash, &table)?;
    Ok(table)
}
