//! Row-stationary array.
//!
//! A PE set is `kh` PEs tall (kernel rows, stationary in the PEs of a row)
//! and `e` PEs wide (output rows). Input rows are multicast along diagonals
//! and partial sums flow up each column. Sets stacked vertically take
//! different input channels, so their partial sums also add up inside the
//! column; sets side by side take different filters and share the input
//! multicast. Depthwise layers spread channels over both directions
//! instead. Kernels taller than the array are cut into folds, and every
//! fold revisits the partial sums through the GLB.
//!
//! Each PE keeps `p` filters × `q` channels of kernel rows, a `q`-channel
//! input window and `p` partial sums in its scratchpad. A word multicast to
//! several scratchpads is one GLB read but occupies every copy, which is
//! what limits `p·q`. Loop order: channel group, filter block, output strip
//! (and column chunk), fold, input-channel block.

use crate::simcore::{SimError, SimResult};
use crate::tensor::InTensor;
use crate::workload::{Geometry, Workload};

use super::gemm_view::{GemmExec, GemmView};
use super::{precheck, timeline, BaselineConfig, Unit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    groups: usize,
    c_in: usize,
    c_out: usize,
    in_w: usize,
    in_h: usize,
    k_w: usize,
    k_h: usize,
    stride: usize,
    dilation: usize,
    out_w: usize,
    out_h: usize,
}

fn geom(w: &Workload) -> Result<Geom, SimError> {
    Ok(match &w.geometry {
        Geometry::Conv(g) => Geom {
            groups: 1,
            c_in: g.c_in,
            c_out: g.c_out,
            in_w: g.in_w,
            in_h: g.in_h,
            k_w: g.k_w,
            k_h: g.k_h,
            stride: g.stride,
            dilation: g.dilation,
            out_w: g.out_w,
            out_h: g.out_h,
        },
        Geometry::Depthwise(g) => Geom {
            groups: g.c_in,
            c_in: 1,
            c_out: 1,
            in_w: g.in_w,
            in_h: g.in_h,
            k_w: g.k_w,
            k_h: g.k_h,
            stride: g.stride,
            dilation: g.dilation,
            out_w: g.out_w,
            out_h: g.out_h,
        },
        Geometry::Gemm { m, n, k } => Geom {
            groups: 1,
            c_in: *k,
            c_out: *n,
            in_w: *m,
            in_h: 1,
            k_w: 1,
            k_h: 1,
            stride: 1,
            dilation: 1,
            out_w: *m,
            out_h: 1,
        },
        Geometry::Correlation { .. } => {
            return Err(SimError::Unsupported(
                "correlation on row-stationary".into(),
            ))
        }
    })
}

/// How a layer is laid onto the array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RsMapping {
    pub folds: usize,
    /// Kernel rows per fold (set height).
    pub set_rows: usize,
    /// Output rows per strip (set width).
    pub strip: usize,
    pub sets_v: usize,
    pub sets_h: usize,
    /// Filters and channels per PE.
    pub p: usize,
    pub q: usize,
    /// Output columns per unit.
    pub col_chunk: usize,
    pub groups_per_pass: usize,
    pub filters_per_pass: usize,
    pub channels_per_pass: usize,
}

fn mapping(cfg: &BaselineConfig, g: &Geom) -> RsMapping {
    let (rows, cols) = (cfg.pe_rows, cfg.pe_cols);
    let folds = g.k_h.div_ceil(rows);
    let set_rows = g.k_h.div_ceil(folds);
    let sets_v = rows / set_rows;
    let strip = g.out_h.min(cols);
    let sets_h = cols / strip;

    let v_group = g.c_in == 1;
    let h_group = g.c_out == 1;
    let q_max = if v_group { 1 } else { g.c_in.div_ceil(sets_v) };
    let p_max = if h_group { 1 } else { g.c_out.div_ceil(sets_h) };
    let (wb, pb) = (cfg.word_bytes as usize, cfg.psum_bytes as usize);
    let spad = cfg.local_buf_bytes_per_pe as usize;
    let fits = |p: usize, q: usize| wb * (p * q * g.k_w + q * g.k_w) + pb * p <= spad;
    let (mut p, mut q) = (1, 1);
    for qq in 1..=q_max {
        for pp in 1..=p_max {
            if fits(pp, qq) && (pp * qq, pp) > (p * q, p) {
                (p, q) = (pp, qq);
            }
        }
    }
    let groups_per_pass =
        (if v_group { sets_v } else { 1 } * if h_group { sets_h } else { 1 }).min(g.groups);
    let filters_per_pass = if h_group {
        1
    } else {
        (p * sets_h).min(g.c_out)
    };
    let channels_per_pass = if v_group { 1 } else { (q * sets_v).min(g.c_in) };

    let unit_psum = (groups_per_pass * filters_per_pass * strip * pb) as u64;
    let col_chunk = ((cfg.glb_bytes / 4 / unit_psum.max(1)) as usize).clamp(1, g.out_w);
    RsMapping {
        folds,
        set_rows,
        strip,
        sets_v,
        sets_h,
        p,
        q,
        col_chunk,
        groups_per_pass,
        filters_per_pass,
        channels_per_pass,
    }
}

/// Mapping the model would use for `w`.
pub fn rs_mapping(cfg: &BaselineConfig, w: &Workload) -> Result<RsMapping, SimError> {
    precheck(cfg, w, None)?;
    Ok(mapping(cfg, &geom(w)?))
}

fn span(n: usize, k: usize, stride: usize, dilation: usize) -> usize {
    (n - 1) * stride + (k - 1) * dilation + 1
}

struct Plan {
    units: Vec<Unit>,
    glb_read: u64,
    glb_write: u64,
    glb_stall: u64,
    bubble: u64,
}

fn plan(cfg: &BaselineConfig, g: &Geom, mp: &RsMapping) -> Plan {
    let (wb, pb) = (cfg.word_bytes, cfg.psum_bytes);
    let glb_rate = cfg.glb_bytes_per_cycle();
    let n_pe = cfg.n_pe() as u64;
    let unit_psum =
        (mp.groups_per_pass * mp.filters_per_pass * mp.strip * mp.col_chunk) as u64 * pb;
    let region = cfg.glb_bytes.saturating_sub(2 * unit_psum);
    let kernel = (g.c_in * g.k_h * g.k_w) as u64 * wb;
    let fold_rows: Vec<usize> = (0..mp.folds)
        .map(|f| (g.k_h - f * mp.set_rows).min(mp.set_rows))
        .collect();

    let mut p = Plan {
        units: vec![],
        glb_read: 0,
        glb_write: 0,
        glb_stall: 0,
        bubble: 0,
    };
    for g0 in (0..g.groups).step_by(mp.groups_per_pass) {
        let ga = ((g0 + mp.groups_per_pass).min(g.groups) - g0) as u64;
        let ifmap_all = ga * (g.c_in * g.in_h * g.in_w) as u64 * wb;
        let filt_all = ga * g.c_out as u64 * kernel;
        let all_fit = ifmap_all + filt_all <= region;
        let ifmap_kept = all_fit || ifmap_all <= region / 2;
        let mut first_of_group = true;
        for f0 in (0..g.c_out).step_by(mp.filters_per_pass) {
            let fa = ((f0 + mp.filters_per_pass).min(g.c_out) - f0) as u64;
            let filt_block = ga * fa * kernel;
            let filt_kept = all_fit || filt_block <= region / 2;
            let mut first_of_block = true;
            for r0 in (0..g.out_h).step_by(mp.strip) {
                let ea = (r0 + mp.strip).min(g.out_h) - r0;
                for c0 in (0..g.out_w).step_by(mp.col_chunk) {
                    let wa = (c0 + mp.col_chunk).min(g.out_w) - c0;
                    let in_cols = span(wa, g.k_w, g.stride, g.dilation).min(g.in_w) as u64;
                    let in_rows = span(ea, g.k_h, g.stride, g.dilation).min(g.in_h) as u64;
                    let mut u = Unit::default();
                    if first_of_group {
                        if all_fit {
                            u.fetch_bytes += ifmap_all + filt_all;
                        } else if ifmap_kept {
                            u.fetch_bytes += ifmap_all;
                        }
                        first_of_group = false;
                    }
                    if !all_fit {
                        if !ifmap_kept {
                            u.fetch_bytes += ga * g.c_in as u64 * in_rows * in_cols * wb;
                        }
                        if !filt_kept || first_of_block {
                            u.fetch_bytes += filt_block;
                        }
                    }
                    first_of_block = false;
                    for (f, &kh) in fold_rows.iter().enumerate() {
                        let rows = span(ea, kh, g.stride, g.dilation).min(g.in_h) as u64;
                        for ci in (0..g.c_in).step_by(mp.channels_per_pass) {
                            let qa = ((ci + mp.channels_per_pass).min(g.c_in) - ci) as u64;
                            let first = f == 0 && ci == 0;
                            let psum = ga * fa * (ea * wa) as u64 * pb;
                            let read = ga * fa * qa * (kh * g.k_w) as u64 * wb
                                + ga * qa * rows * in_cols * wb
                                + if first { 0 } else { psum };
                            let p_pe = if g.c_out == 1 {
                                1
                            } else {
                                fa.div_ceil(mp.sets_h as u64)
                            };
                            let q_pe = if g.c_in == 1 {
                                1
                            } else {
                                qa.div_ceil(mp.sets_v as u64)
                            };
                            let compute = p_pe * q_pe * (g.k_w * wa) as u64;
                            let t = compute.max(((read + psum) as f64 / glb_rate).ceil() as u64);
                            let macs = ga * fa * qa * (kh * g.k_w * ea * wa) as u64;
                            p.glb_read += read;
                            p.glb_write += psum;
                            p.glb_stall += t - compute;
                            p.bubble += compute - macs.div_ceil(n_pe).min(compute);
                            u.cycles += t;
                        }
                    }
                    u.write_bytes = ga * fa * (ea * wa) as u64 * pb;
                    p.units.push(u);
                }
            }
        }
    }
    p
}

pub fn run_eyeriss(
    cfg: &BaselineConfig,
    w: &Workload,
    inputs: Option<&[InTensor]>,
) -> Result<SimResult, SimError> {
    precheck(cfg, w, inputs)?;
    let g = geom(w)?;
    let mp = mapping(cfg, &g);
    let p = plan(cfg, &g, &mp);
    let tl = timeline(
        &p.units,
        cfg.dram_bytes_per_cycle(),
        cfg.dram_latency_cycles,
    );

    let mut res = SimResult::new(cfg.kind.name(), &w.name, cfg.n_pe(), cfg.clock_hz);
    res.cycles = tl.cycles;
    res.macs = w.macs();
    res.glb_read_bytes = p.glb_read;
    res.glb_write_bytes = p.glb_write;
    res.dram_read_bytes = p.units.iter().map(|u| u.fetch_bytes).sum();
    res.dram_write_bytes = p.units.iter().map(|u| u.write_bytes).sum();
    res.glb_fill_bytes = res.dram_read_bytes;
    res.stalls.dram = tl.dram_stall;
    res.stalls.glb = p.glb_stall;
    res.stalls.tile_bubble = p.bubble;

    if let Some(inputs) = inputs {
        // Values: per filter block, accumulate input-channel blocks in order.
        let v = GemmView::new(w);
        let per_ch = g.k_w * g.k_h;
        let mut ex = GemmExec::new(w, &v, inputs);
        for gi in 0..v.gs {
            let ga = ex.gather(gi);
            for n0 in (0..v.ns).step_by(mp.filters_per_pass) {
                let n1 = (n0 + mp.filters_per_pass).min(v.ns);
                let mut acc = vec![0i32; v.ms * (n1 - n0)];
                for ci in (0..g.c_in).step_by(mp.channels_per_pass) {
                    let k0 = ci * per_ch;
                    let k1 = ((ci + mp.channels_per_pass).min(g.c_in) * per_ch).min(v.ks);
                    ex.accumulate(&ga, (0, v.ms), (n0, n1), (k0, k1), &mut acc);
                }
                ex.write_back(gi, (0, v.ms), (n0, n1), &acc);
            }
        }
        res.output = Some(ex.out);
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_inputs;
    use crate::workload::{
        eval_reference, make_conv, make_correlation, make_depthwise, make_gemm, ConvParams,
    };

    fn conv(c_in: usize, c_out: usize, hw: usize, k: usize, stride: usize) -> Workload {
        make_conv(&ConvParams {
            c_in,
            c_out,
            in_w: hw,
            in_h: hw,
            k_w: k,
            k_h: k,
            stride,
            dilation: 1,
        })
        .unwrap()
    }

    #[test]
    fn mapping_shapes() {
        let cfg = BaselineConfig::row_stationary(128).unwrap();
        let m = rs_mapping(&cfg, &conv(64, 64, 30, 3, 1)).unwrap();
        assert_eq!(
            (m.folds, m.set_rows, m.sets_v, m.strip, m.sets_h),
            (1, 3, 2, 16, 1)
        );
        // spad bound: 2·(p·q·3 + q·3) + 4·p ≤ 307
        assert!(2 * (m.p * m.q * 3 + m.q * 3) + 4 * m.p <= 307);
        let big = rs_mapping(&cfg, &conv(3, 8, 40, 11, 4)).unwrap();
        assert_eq!((big.folds, big.set_rows, big.sets_v), (2, 6, 1));
    }

    #[test]
    fn exact_outputs() {
        let cfg = BaselineConfig::row_stationary(128).unwrap();
        for w in [
            conv(5, 7, 12, 3, 1),
            conv(3, 4, 23, 11, 4),
            make_depthwise(6, 9, 9, 3, 3, 2, 1).unwrap(),
            make_gemm(30, 20, 17).unwrap(),
        ] {
            let inp = random_inputs(&w, 9);
            let r = run_eyeriss(&cfg, &w, Some(&inp)).unwrap();
            assert_eq!(
                r.output.as_ref().unwrap(),
                &eval_reference(&w, &inp).unwrap(),
                "{}",
                w.name
            );
            assert_eq!(r.dram_write_bytes, w.output_elements() * 4);
            assert!(r.utilization() <= 1.0);
        }
    }

    #[test]
    fn folding_charges_psum_revisits() {
        let cfg = BaselineConfig::row_stationary(128).unwrap();
        let tall = run_eyeriss(&cfg, &conv(1, 1, 24, 11, 1), None).unwrap();
        let m = rs_mapping(&cfg, &conv(1, 1, 24, 11, 1)).unwrap();
        assert_eq!(m.folds, 2);
        // one read-back per extra fold
        let out = 14 * 14 * 4;
        assert_eq!(tall.glb_write_bytes, 2 * out);
    }

    #[test]
    fn correlation_rejected() {
        let cfg = BaselineConfig::row_stationary(128).unwrap();
        let w = make_correlation(4, 6, 5, 3, 3).unwrap();
        assert!(matches!(
            run_eyeriss(&cfg, &w, None),
            Err(SimError::Unsupported(_))
        ));
    }
}
