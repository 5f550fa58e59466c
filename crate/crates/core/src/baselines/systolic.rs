//! Weight-stationary systolic array.
//!
//! The array holds a `pe_rows × pe_cols` tile of the weight matrix (`K`
//! down the rows, `N` across the columns) while the rows of `M` stream
//! through it at most one row per cycle, slower when the pass's GLB traffic
//! needs more time; each pass then adds `pe_rows + pe_cols - 1` fill/drain
//! cycles. Loop order is batch, then chunks of `M` rows sized by
//! the accumulator space, then `N` tiles, then `K` tiles (a row-major sweep
//! of output tiles). Every pass reads its streamed rows and weights from the
//! GLB and writes its partial sums there; all but the first `K` tile of a
//! sweep also read the partial sums back. Convolutions are lowered by
//! address generation; DRAM sees the raw tensors.

use crate::simcore::{SimError, SimResult};
use crate::tensor::InTensor;
use crate::workload::Workload;

use super::gemm_view::{GemmExec, GemmView};
use super::{precheck, timeline, BaselineConfig, Unit};

/// Loop bounds and pass statistics of one systolic run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystolicSchedule {
    pub batch: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// `M` rows per accumulator chunk.
    pub chunk_rows: usize,
    pub passes: u64,
    /// Stream plus fill/drain cycles summed over passes.
    pub array_cycles: u64,
}

struct Plan {
    sched: SystolicSchedule,
    units: Vec<Unit>,
    glb_read: u64,
    glb_write: u64,
    bubble: u64,
    glb_stall: u64,
}

fn plan(cfg: &BaselineConfig, w: &Workload, v: &GemmView) -> Plan {
    let (r, c) = (cfg.pe_rows, cfg.pe_cols);
    let (wb, pb) = (cfg.word_bytes, cfg.psum_bytes);
    let glb_rate = cfg.glb_bytes_per_cycle();
    let fill = (r + c - 1) as u64;

    let chunk = ((cfg.glb_bytes / (4 * c as u64 * pb)) as usize).clamp(1, v.ms);
    let region = cfg.glb_bytes - 2 * chunk as u64 * c as u64 * pb;
    let act_total = v.act_footprint(w, 0, v.ms) * wb;
    let w_total = v.weight_words(w) * wb;
    let all_fit = act_total + w_total <= region;
    let weights_kept = all_fit || w_total <= region / 2;

    let mut p = Plan {
        sched: SystolicSchedule {
            batch: v.gs,
            m: v.ms,
            n: v.ns,
            k: v.ks,
            chunk_rows: chunk,
            passes: 0,
            array_cycles: 0,
        },
        units: vec![],
        glb_read: 0,
        glb_write: 0,
        bubble: 0,
        glb_stall: 0,
    };
    for _g in 0..v.gs {
        let mut first_of_batch = true;
        for m0 in (0..v.ms).step_by(chunk) {
            let m1 = (m0 + chunk).min(v.ms);
            let mlen = (m1 - m0) as u64;
            let act_chunk = v.act_footprint(w, m0, m1) * wb;
            let act_kept = act_chunk <= region / 2;
            for n0 in (0..v.ns).step_by(c) {
                let clen = ((n0 + c).min(v.ns) - n0) as u64;
                let mut u = Unit::default();
                if first_of_batch {
                    u.fetch_bytes += if weights_kept { w_total } else { 0 };
                    u.fetch_bytes += if all_fit { act_total } else { 0 };
                    first_of_batch = false;
                }
                if !weights_kept {
                    u.fetch_bytes += v.ks as u64 * clen * wb;
                }
                if !all_fit && (!act_kept || n0 == 0) {
                    u.fetch_bytes += act_chunk;
                }
                for k0 in (0..v.ks).step_by(r) {
                    let rlen = ((k0 + r).min(v.ks) - k0) as u64;
                    let read = mlen * rlen * wb
                        + rlen * clen * wb
                        + if k0 > 0 { mlen * clen * pb } else { 0 };
                    let write = mlen * clen * pb;
                    let array = mlen + fill;
                    let t = mlen.max(((read + write) as f64 / glb_rate).ceil() as u64) + fill;
                    p.glb_read += read;
                    p.glb_write += write;
                    p.bubble += fill;
                    p.glb_stall += t - array;
                    p.sched.passes += 1;
                    p.sched.array_cycles += array;
                    u.cycles += t;
                }
                u.write_bytes = mlen * clen * pb;
                p.units.push(u);
            }
        }
    }
    p
}

/// Loop structure the model would use for `w`, without running it.
pub fn systolic_schedule(cfg: &BaselineConfig, w: &Workload) -> Result<SystolicSchedule, SimError> {
    precheck(cfg, w, None)?;
    let v = GemmView::new(w);
    Ok(plan(cfg, w, &v).sched)
}

pub fn run_systolic(
    cfg: &BaselineConfig,
    w: &Workload,
    inputs: Option<&[InTensor]>,
) -> Result<SimResult, SimError> {
    precheck(cfg, w, inputs)?;
    let v = GemmView::new(w);
    let p = plan(cfg, w, &v);
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
        let (r, c, chunk) = (cfg.pe_rows, cfg.pe_cols, p.sched.chunk_rows);
        let mut ex = GemmExec::new(w, &v, inputs);
        for g in 0..v.gs {
            let ga = ex.gather(g);
            for m0 in (0..v.ms).step_by(chunk) {
                let m1 = (m0 + chunk).min(v.ms);
                for n0 in (0..v.ns).step_by(c) {
                    let n1 = (n0 + c).min(v.ns);
                    let mut acc = vec![0i32; (m1 - m0) * (n1 - n0)];
                    for k0 in (0..v.ks).step_by(r) {
                        let k1 = (k0 + r).min(v.ks);
                        ex.accumulate(&ga, (m0, m1), (n0, n1), (k0, k1), &mut acc);
                    }
                    ex.write_back(g, (m0, m1), (n0, n1), &acc);
                }
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
    use crate::workload::{eval_reference, make_correlation, make_gemm};

    #[test]
    fn single_stationary_tile_closed_form() {
        // K = 8 rows, N = 16 columns: exactly one weight tile; 64 rows stream.
        let cfg = BaselineConfig::systolic(128).unwrap();
        let w = make_gemm(64, 16, 8).unwrap();
        let s = systolic_schedule(&cfg, &w).unwrap();
        assert_eq!(s.passes, 1);
        assert_eq!(s.array_cycles, 64 + 8 + 16 - 1);
        let r = run_systolic(&cfg, &w, None).unwrap();
        let fetch = (64 * 8 + 8 * 16) * 2;
        let write = 64 * 16 * 4;
        assert_eq!(r.dram_read_bytes, fetch);
        assert_eq!(r.dram_write_bytes, write);
        assert_eq!(r.cycles, fetch / 32 + 100 + 87 + write / 32);
        assert_eq!(r.glb_read_bytes, fetch);
        assert_eq!(r.glb_write_bytes, write);
    }

    #[test]
    fn tiny_gemm_mostly_bubbles() {
        let cfg = BaselineConfig::systolic(128).unwrap();
        let r = run_systolic(&cfg, &make_gemm(1, 1, 1).unwrap(), None).unwrap();
        assert!(r.utilization() < 0.01);
    }

    #[test]
    fn exact_outputs() {
        for pes in [128, 512] {
            let cfg = BaselineConfig::systolic(pes).unwrap();
            for w in [
                make_gemm(37, 21, 19).unwrap(),
                make_gemm(600, 40, 30).unwrap(),
            ] {
                let inp = random_inputs(&w, 5);
                let r = run_systolic(&cfg, &w, Some(&inp)).unwrap();
                assert_eq!(r.output.unwrap(), eval_reference(&w, &inp).unwrap());
                assert_eq!(r.dram_write_bytes, w.output_elements() * 4);
            }
        }
    }

    #[test]
    fn correlation_rejected() {
        let cfg = BaselineConfig::systolic(128).unwrap();
        let w = make_correlation(4, 6, 5, 3, 3).unwrap();
        assert!(matches!(
            run_systolic(&cfg, &w, None),
            Err(SimError::Unsupported(_))
        ));
    }
}
