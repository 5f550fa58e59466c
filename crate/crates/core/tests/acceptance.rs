//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Known gaps are listed in `KNOWN_GAPS`; a failure there is reported but
//! does not fail the target. Any other failure exits non-zero.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vmesh::baselines::{run_baseline, BaselineConfig};
use vmesh::bfn::{check_conflict_free, odd_stride_addresses, verify_routing};
use vmesh::catalog::{catalog, classic, LayerKind, Suite};
use vmesh::manifest::{run_cell, stats_csv, ArchKind, RunSpec};
use vmesh::schedule::select_tile;
use vmesh::simcore::{run_vectormesh, ArchConfig, RunOptions, SimError, SimResult};
use vmesh::tensor::random_inputs;
use vmesh::workload::{
    eval_reference, make_conv, make_correlation, make_depthwise, make_gemm, ConvParams, Geometry,
    Workload,
};

const KNOWN_GAPS: &[u32] = &[5, 6, 7, 8];

const ARCHS: [&str; 3] = ["systolic", "row-stationary", "vectormesh"];

// Relative area per architecture.
const AREA: [f64; 3] = [0.46, 1.00, 1.04];

struct Outcome {
    id: u32,
    pass: bool,
}

fn run_arch(
    arch: usize,
    pes: usize,
    w: &Workload,
    functional: bool,
) -> Result<(SimResult, Option<bool>), SimError> {
    let inputs = random_inputs(w, 0xACCE);
    let r = match arch {
        0 | 1 => {
            let cfg = if arch == 0 {
                BaselineConfig::systolic(pes)?
            } else {
                BaselineConfig::row_stationary(pes)?
            };
            run_baseline(&cfg, w, functional.then_some(&inputs[..]))?
        }
        _ => {
            let cfg = ArchConfig::for_pes(pes)?;
            let opts = if functional {
                RunOptions::functional()
            } else {
                RunOptions::timing()
            };
            run_vectormesh(&cfg, w, if functional { &inputs[..] } else { &[] }, opts)?
        }
    };
    let ok = match &r.output {
        Some(out) if functional => Some(*out == eval_reference(w, &inputs)?),
        _ => None,
    };
    Ok((r, ok))
}

/// Compute or DRAM bound in GOPS, from raw tensor sizes.
fn roof_gops(w: &Workload, pes: usize, clock_hz: f64, dram_bps: f64) -> (f64, bool) {
    let bytes: u64 = w
        .operands
        .iter()
        .map(|o| o.shape.iter().product::<usize>() as u64 * o.word_bytes as u64)
        .sum::<u64>()
        + w.output_shape.iter().product::<usize>() as u64 * w.psum_bytes as u64;
    let t_c = w.macs() as f64 / (pes as f64 * clock_hz);
    let t_m = bytes as f64 / dram_bps;
    (2.0 * w.macs() as f64 / t_c.max(t_m) / 1e9, t_m > t_c)
}

fn gops(r: &SimResult) -> f64 {
    2.0 * r.macs as f64 * r.clock_hz / r.cycles as f64 / 1e9
}

fn per_kmac(bytes: u64, macs: u64) -> f64 {
    bytes as f64 * 1000.0 / macs as f64
}

fn geo(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

fn random_small(rng: &mut ChaCha8Rng) -> Workload {
    loop {
        let w = match rng.gen_range(0..4) {
            0 => make_gemm(
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
            ),
            1 => {
                let k_w = rng.gen_range(1..=3);
                let k_h = rng.gen_range(1..=3);
                let stride = rng.gen_range(1..=2);
                let dilation = rng.gen_range(1..=2);
                make_conv(&ConvParams {
                    c_in: rng.gen_range(1..=8),
                    c_out: rng.gen_range(1..=8),
                    in_w: rng.gen_range(k_w..=8),
                    in_h: rng.gen_range(k_h..=8),
                    k_w,
                    k_h,
                    stride,
                    dilation,
                })
            }
            2 => {
                let k = rng.gen_range(1..=3);
                make_depthwise(
                    rng.gen_range(1..=8),
                    rng.gen_range(k..=8),
                    rng.gen_range(k..=8),
                    k,
                    k,
                    rng.gen_range(1..=2),
                    1,
                )
            }
            _ => make_correlation(
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=5),
                rng.gen_range(1..=5),
            ),
        };
        if let Ok(w) = w {
            if w.extents().iter().all(|&e| e <= 8) {
                return w;
            }
        }
    }
}

fn is_correlation(w: &Workload) -> bool {
    matches!(w.geometry, Geometry::Correlation { .. })
}

/// Lowest words-per-MAC over every tile `(tm, tn, tk)` that fits.
fn brute_gemm_tile(m: usize, n: usize, k: usize, input: u64, psum: u64) -> Option<Ratio<u64>> {
    let mut best: Option<Ratio<u64>> = None;
    for tm in 1..=m {
        for tn in 1..=n {
            if (tm * tn) as u64 > psum {
                continue;
            }
            for tk in 1..=k {
                let words = ((tm + tn) * tk) as u64;
                if words > input {
                    continue;
                }
                let r = Ratio::new(words, (tm * tn * tk) as u64);
                if best.map_or(true, |b| r < b) {
                    best = Some(r);
                }
            }
        }
    }
    best
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut out: Vec<Outcome> = vec![];
    let mut push = |id: u32, pass: bool, detail: String| {
        println!(
            "{} criterion {id}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        out.push(Outcome { id, pass });
    };

    // Functional runs on the classic suite at 128 PEs; their timing also
    // feeds the 128-PE performance criteria.
    let layers: Vec<(String, Workload)> = classic()
        .into_iter()
        .map(|e| (e.name.clone(), e.build().expect("catalog entry builds")))
        .collect();
    let mut runs: BTreeMap<(usize, usize, String), SimResult> = BTreeMap::new();
    let mut mismatches = vec![];
    let mut errors = vec![];
    let mut bank_checks = 0u64;
    let mut write_errors = vec![];
    let mut record = |pes: usize, arch: usize, name: &str, w: &Workload, r: &SimResult| {
        if r.dram_write_bytes != w.output_elements() * w.psum_bytes as u64 {
            write_errors.push(format!("{} {pes} {name}", ARCHS[arch]));
        }
    };
    for (name, w) in &layers {
        for arch in 0..3 {
            match run_arch(arch, 128, w, true) {
                Ok((r, ok)) => {
                    if ok != Some(true) {
                        mismatches.push(format!("{} {name}", ARCHS[arch]));
                    }
                    bank_checks += r.bank_checks;
                    record(128, arch, name, w, &r);
                    runs.insert((128, arch, name.clone()), r);
                }
                Err(e) => errors.push(format!("{} {name}: {e}", ARCHS[arch])),
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut random_runs = 0;
    for i in 0..100 {
        let w = random_small(&mut rng);
        let archs: &[usize] = if is_correlation(&w) { &[2] } else { &[0, 1, 2] };
        for &arch in archs {
            for pes in [128, 512] {
                random_runs += 1;
                match run_arch(arch, pes, &w, true) {
                    Ok((r, ok)) => {
                        if ok != Some(true) {
                            mismatches.push(format!("{} {pes} random#{i} {}", ARCHS[arch], w.name));
                        }
                        bank_checks += r.bank_checks;
                        record(pes, arch, &w.name, &w, &r);
                    }
                    Err(e) => {
                        errors.push(format!("{} {pes} random#{i} {}: {e}", ARCHS[arch], w.name))
                    }
                }
            }
        }
    }
    push(
        1,
        mismatches.is_empty() && errors.is_empty(),
        format!(
            "functional equivalence: {} layers x 3 architectures + {random_runs} random runs; {} mismatches, {} errors {:?}{:?} ({:.0}s)",
            layers.len(),
            mismatches.len(),
            errors.len(),
            mismatches,
            errors,
            t0.elapsed().as_secs_f64()
        ),
    );

    // Timing-only runs at 512 PEs.
    for (name, w) in &layers {
        for arch in 0..3 {
            match run_arch(arch, 512, w, false) {
                Ok((r, _)) => {
                    bank_checks += r.bank_checks;
                    record(512, arch, name, w, &r);
                    runs.insert((512, arch, name.clone()), r);
                }
                Err(e) => errors.push(format!("{} 512 {name}: {e}", ARCHS[arch])),
            }
        }
    }

    // Catalog layers beyond the classic suite: dilated and correlation on
    // VectorMesh (functional), baselines where they apply.
    let mut breadth = vec![];
    let mut breadth_ok = true;
    for e in catalog()
        .into_iter()
        .filter(|e| e.suite == Suite::Modern || e.suite == Suite::Matching)
    {
        let w = e.build().expect("catalog entry builds");
        let corr = e.kind == LayerKind::Correlation;
        if !(corr || e.dilation > 1) {
            continue;
        }
        for arch in 0..2 {
            match run_arch(arch, 128, &w, false) {
                Err(SimError::Unsupported(_)) if corr => {}
                Ok((r, _)) if !corr => record(128, arch, &e.name, &w, &r),
                other => {
                    breadth_ok = false;
                    breadth.push(format!(
                        "{} {}: unexpected {:?}",
                        ARCHS[arch],
                        e.name,
                        other.map(|x| x.0.cycles)
                    ));
                }
            }
        }
        match run_arch(2, 128, &w, true) {
            Ok((r, ok)) => {
                bank_checks += r.bank_checks;
                record(128, 2, &e.name, &w, &r);
                let cfg = ArchConfig::vectormesh_128();
                let (roof, mem) = roof_gops(&w, 128, cfg.clock_hz, cfg.dram_bytes_per_sec);
                let frac = gops(&r) / roof;
                if ok != Some(true) {
                    breadth_ok = false;
                    breadth.push(format!("{} output mismatch", e.name));
                }
                if mem && frac < 0.7 {
                    breadth_ok = false;
                }
                breadth.push(format!(
                    "{} {}{:.2}",
                    e.name,
                    if mem { "memory-bound " } else { "" },
                    frac
                ));
            }
            Err(err) => {
                breadth_ok = false;
                breadth.push(format!("{}: {err}", e.name));
            }
        }
    }

    // BFN guarantee.
    let mut bfn_bad = vec![];
    let mut exhaustive = 0u64;
    for x in 1..=4u32 {
        let n = 1u32 << x;
        let odd: Vec<i64> = (0..n as i64).filter(|o| o % 2 == 1).collect();
        let mut idx = vec![0usize; x as usize];
        loop {
            let coeffs: Vec<i64> = idx.iter().map(|&i| odd[i]).collect();
            for a0 in 0..n {
                exhaustive += 1;
                let a = odd_stride_addresses(a0, &coeffs, x).expect("valid pattern");
                let banks: Vec<u32> = a.addresses.iter().map(|v| v.unwrap() % n).collect();
                let mut seen = vec![false; n as usize];
                let distinct = banks
                    .iter()
                    .all(|&b| !std::mem::replace(&mut seen[b as usize], true));
                if !distinct
                    || !check_conflict_free(&a).conflict_free
                    || verify_routing(&a).is_err()
                {
                    bfn_bad.push(format!("X={x} a0={a0} {coeffs:?}"));
                }
            }
            let mut d = 0;
            while d < idx.len() {
                idx[d] += 1;
                if idx[d] < odd.len() {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == idx.len() {
                break;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100_000 {
        let coeffs: Vec<i64> = (0..5).map(|_| 2 * rng.gen_range(0..2048i64) + 1).collect();
        let a0 = rng.gen_range(0..1u32 << 20);
        let a = odd_stride_addresses(a0, &coeffs, 5).expect("valid pattern");
        let mut seen = [false; 32];
        let distinct = a
            .addresses
            .iter()
            .all(|v| !std::mem::replace(&mut seen[(v.unwrap() % 32) as usize], true));
        if !distinct || verify_routing(&a).is_err() {
            bfn_bad.push(format!("X=5 a0={a0} {coeffs:?}"));
        }
    }
    push(
        2,
        bfn_bad.is_empty() && bank_checks > 0,
        format!(
            "conflict-free odd strides: {exhaustive} exhaustive + 100000 random patterns, {} failures; {bank_checks} in-run bank checks without conflict",
            bfn_bad.len()
        ),
    );

    // Tiler optimality against brute force.
    let mut tiler_bad = vec![];
    let mut tiler_cases = 0;
    for m in 1..=16 {
        for n in 1..=16 {
            for k in 1..=16 {
                let w = make_gemm(m, n, k).unwrap();
                for (inp, ps) in [(2u64, 1u64), (24, 16), (64, 64), (100, 30), (256, 256)] {
                    tiler_cases += 1;
                    let want = brute_gemm_tile(m, n, k, inp, ps);
                    let got = select_tile(&w, inp, ps).ok();
                    let same = match (&got, want) {
                        (Some(t), Some(b)) => {
                            t.bandwidth_per_mac == b && {
                                let e = &t.extents;
                                ((e[0] + e[1]) * e[2]) as u64 <= inp && (e[0] * e[1]) as u64 <= ps
                            }
                        }
                        (None, None) => true,
                        _ => false,
                    };
                    if !same {
                        tiler_bad.push(format!("{m}x{n}x{k} buf {inp}/{ps}"));
                    }
                }
            }
        }
    }
    push(
        3,
        tiler_bad.is_empty(),
        format!(
            "tile selection equals brute-force argmin on {tiler_cases} GEMM cases; {} differ {:?}",
            tiler_bad.len(),
            tiler_bad.iter().take(5).collect::<Vec<_>>()
        ),
    );

    push(
        4,
        write_errors.is_empty(),
        format!(
            "DRAM write bytes equal output bytes on every run; {} violations {:?}",
            write_errors.len(),
            write_errors
        ),
    );

    // Roofline.
    let mut above = vec![];
    let mut low = vec![];
    let mut vm_fracs = vec![];
    for ((pes, arch, name), r) in &runs {
        let w = &layers.iter().find(|(n, _)| n == name).unwrap().1;
        let (roof, mem) = roof_gops(w, *pes, r.clock_hz, 6.4e9);
        let g = gops(r);
        if g > roof * (1.0 + 1e-9) {
            above.push(format!("{} {pes} {name} {g:.2}>{roof:.2}", ARCHS[*arch]));
        }
        if *arch == 2 && !mem {
            vm_fracs.push(g / roof);
            if g < 0.7 * roof {
                low.push(format!("{pes} {name} {:.3}", g / roof));
            }
        }
    }
    push(
        5,
        above.is_empty() && low.is_empty(),
        format!(
            "{} cells at or under roofline ({} above {:?}); vectormesh compute-bound layers min {:.3} of roofline, {} below 0.70 {:?}",
            runs.len(),
            above.len(),
            above,
            vm_fracs.iter().cloned().fold(f64::INFINITY, f64::min),
            low.len(),
            low
        ),
    );

    // Normalized access and area efficiency.
    let metric = |pes: usize, arch: usize, f: &dyn Fn(&SimResult) -> f64| -> Vec<f64> {
        layers
            .iter()
            .filter_map(|(n, _)| runs.get(&(pes, arch, n.clone())).map(f))
            .collect()
    };
    let glb = |r: &SimResult| per_kmac(r.glb_read_bytes + r.glb_write_bytes, r.macs);
    let dram = |r: &SimResult| per_kmac(r.dram_read_bytes + r.dram_write_bytes, r.macs);
    let glb128: Vec<f64> = (0..3).map(|a| geo(&metric(128, a, &glb))).collect();
    let dram128: Vec<f64> = (0..3).map(|a| geo(&metric(128, a, &dram))).collect();
    let (g_sys, g_rs, d_sys) = (
        glb128[0] / glb128[2],
        glb128[1] / glb128[2],
        dram128[0] / dram128[2],
    );
    let ok6 = (10.0..=30.0).contains(&g_sys)
        && (2.0..=6.0).contains(&g_rs)
        && (2.0..=8.0).contains(&d_sys);
    push(
        6,
        ok6,
        format!(
            "128-PE geomean ratios: GLB systolic/vm {g_sys:.2} (10..30), GLB rs/vm {g_rs:.2} (2..6), DRAM systolic/vm {d_sys:.2} (2..8); GLB {glb128:.1?} DRAM {dram128:.1?}"
        ),
    );

    let ae = |pes: usize| -> Vec<f64> {
        let n = pes as f64 / 128.0;
        (0..3)
            .map(|a| {
                let p = metric(pes, a, &gops);
                p.iter().sum::<f64>() / p.len() as f64 / (AREA[a] * n)
            })
            .collect()
    };
    let ae128 = ae(128);
    let ae512 = ae(512);
    let glb512: Vec<f64> = (0..3).map(|a| geo(&metric(512, a, &glb))).collect();
    let o_glb = glb512[0] > glb512[1] && glb512[1] > glb512[2];
    let o_ae512 = ae512[2] > ae512[0] && ae512[0] > ae512[1];
    let o_ae128 = ae128[0] > ae128[2] && ae128[2] > ae128[1];
    push(
        7,
        o_glb && o_ae512 && o_ae128,
        format!(
            "512 GLB sys>rs>vm {o_glb} {glb512:.1?}; 512 area-eff vm>sys>rs {o_ae512} {ae512:.2?}; 128 area-eff sys>vm>rs {o_ae128} {ae128:.2?}"
        ),
    );

    // Small-GEMM scaling.
    let w = make_gemm(16, 16, 64).unwrap();
    let util = |arch: usize, pes: usize| {
        run_arch(arch, pes, &w, false)
            .map(|(r, _)| r.utilization())
            .unwrap_or(f64::NAN)
    };
    let (s128, s512, v128, v512) = (util(0, 128), util(0, 512), util(2, 128), util(2, 512));
    let (ds, dv) = (s128 - s512, v128 - v512);
    push(
        8,
        s512 < s128 && dv < ds / 2.0,
        format!(
            "GEMM 16x16x64 utilization systolic {s128:.3} -> {s512:.3} (drop {ds:.3}), vectormesh {v128:.3} -> {v512:.3} (drop {dv:.3}, limit {:.3})",
            ds / 2.0
        ),
    );

    push(9, breadth_ok, format!("correlation rejected by baselines, memory-bound cases within 30% of roofline: {breadth:?}"));

    // Determinism through the manifest path.
    let mut spec = RunSpec::new();
    spec.seed = Some(11);
    spec.spatial = Some(20);
    let mut diffs = vec![];
    for (arch, name) in [
        (ArchKind::Vectormesh, "AL CONV3"),
        (ArchKind::Vectormesh, "EVA BM"),
        (ArchKind::Systolic, "TY CONV4"),
        (ArchKind::RowStationary, "IN 1x7"),
    ] {
        for pes in [128, 512] {
            let m = spec
                .resolve(arch, pes, spec.entry(Some(name)).unwrap())
                .unwrap();
            let a = run_cell(&m, false, None).map(|c| stats_csv(&[c.result.stats()]).unwrap());
            let b = run_cell(&m, false, None).map(|c| stats_csv(&[c.result.stats()]).unwrap());
            let same = matches!((&a, &b), (Ok(x), Ok(y)) if x == y) && m.hash() == m.clone().hash();
            if !same {
                diffs.push(format!("{} {pes} {name}", arch.name()));
            }
        }
    }
    push(
        10,
        diffs.is_empty(),
        format!(
            "stats byte-identical across repeated runs of 8 manifests; {} differ {:?}",
            diffs.len(),
            diffs
        ),
    );

    let passed = out.iter().filter(|o| o.pass).count();
    let unexpected: Vec<u32> = out
        .iter()
        .filter(|o| !o.pass && !KNOWN_GAPS.contains(&o.id))
        .map(|o| o.id)
        .collect();
    let fixed: Vec<u32> = out
        .iter()
        .filter(|o| o.pass && KNOWN_GAPS.contains(&o.id))
        .map(|o| o.id)
        .collect();
    println!(
        "acceptance: {passed}/{} criteria pass; known gaps {KNOWN_GAPS:?}; unexpected failures {unexpected:?}; now passing {fixed:?} ({:.0}s)",
        out.len(),
        t0.elapsed().as_secs_f64()
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
