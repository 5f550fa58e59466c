//! Whole-mesh schedule selection for VectorMesh.
//!
//! Candidates are the buffer-fitting tiles; each is scored by an estimate of
//! run time (compute cycles against DRAM and GLB transfer time). The cost
//! uses the best lane factorization ignoring routability, so a lazy heap
//! re-scores a candidate once its real lowering is known.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::lowering::{factorizations, lane_orders, lower_with_capacity, TeuProgram};
use super::sharing::{default_assignment, sharing_axes, AxisAssignment, SharingPlan};
use super::tiling::{footprint, for_each_fitting, BufferBudget, SearchSpace, TileScheme};
use super::ScheduleError;
use crate::workload::Workload;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanRequest {
    pub mesh: (usize, usize),
    pub budget: BufferBudget,
    pub x_bits: u32,
    pub word_bytes: u64,
    pub psum_bytes: u64,
    pub dram_bytes_per_cycle: f64,
    pub glb_bytes_per_cycle: f64,
    pub dram_latency_cycles: u64,
    pub space: SearchSpace,
    pub tile: Option<Vec<usize>>,
    pub assignment: Option<AxisAssignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmPlan {
    pub scheme: TileScheme,
    pub program: TeuProgram,
    pub sharing: SharingPlan,
    pub est_cycles: u64,
    pub est_dram_bytes: u64,
}

impl VmPlan {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}

struct Estimator<'a> {
    w: &'a Workload,
    req: &'a PlanRequest,
    assignment: AxisAssignment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Cost {
    cycles: u64,
    dram_bytes: u64,
}

impl Estimator<'_> {
    fn mesh_len(&self, d: usize) -> usize {
        let (r, c) = self.req.mesh;
        let mut len = 1;
        if d == self.assignment.rows {
            len *= r;
        }
        if d == self.assignment.cols {
            len *= c;
        }
        len
    }

    /// Lane groups summed over all super tiles along each parallel index.
    fn group_sums(&self, tile: &[usize], factors: &[usize]) -> u64 {
        let ext = self.w.extents();
        (0..self.w.parallel_count)
            .map(|d| {
                let s = tile[d] * self.mesh_len(d);
                let mut sum = 0u64;
                let mut o = 0;
                while o < ext[d] {
                    sum += tile[d].min(ext[d] - o).div_ceil(factors[d]) as u64;
                    o += s;
                }
                sum
            })
            .product()
    }

    fn cost(&self, scheme: &TileScheme, factors: &[usize], sharing: &SharingPlan) -> Cost {
        let w = self.w;
        let p = w.parallel_count;
        let ext = w.extents();
        let tile = &scheme.extents;
        let temporal: u64 = ext[p..].iter().map(|&e| e as u64).product();
        let compute = self.group_sums(tile, factors) * temporal;

        let n_super: Vec<u64> = (0..p)
            .map(|d| ext[d].div_ceil(tile[d] * self.mesh_len(d)) as u64)
            .collect();
        let n_temporal: u64 = (p..w.rank())
            .map(|d| ext[d].div_ceil(tile[d]) as u64)
            .product();
        let steps = n_super.iter().product::<u64>() * n_temporal;
        let super_box: Vec<usize> = (0..w.rank())
            .map(|d| {
                if d < p {
                    tile[d] * self.mesh_len(d)
                } else {
                    tile[d]
                }
            })
            .collect();
        let teus = (self.req.mesh.0 * self.req.mesh.1) as u64;
        let mut dram_words = 0u64;
        let mut glb_words = 0u64;
        let mut fetch_steps = 0u64;
        let mut first_words = 0u64;
        for x in 0..2 {
            let map = &w.operands[x].map;
            let fetches = if n_temporal == 1 {
                let last_dep = (0..p).rev().find(|&d| !map.invariant_to(d));
                match last_dep {
                    None => 1,
                    Some(ld) => n_super[..=ld].iter().product(),
                }
            } else {
                steps
            };
            fetch_steps = fetch_steps.max(fetches);
            first_words += footprint(w, x, &super_box);
            dram_words += fetches * footprint(w, x, &super_box);
            let copies = match sharing.operands[x].forward {
                None => teus,
                Some(a) => teus / sharing.axis_len(a) as u64,
            };
            glb_words += fetches * copies * scheme.input_footprints[x];
        }
        let out = w.output_elements() * self.req.psum_bytes;
        let dram_bytes = dram_words * self.req.word_bytes + out;
        let glb_bytes = glb_words * self.req.word_bytes + out;
        // Each prefetch waits out the DRAM latency before it can land.
        let mem = (dram_bytes as f64 / self.req.dram_bytes_per_cycle)
            .max(glb_bytes as f64 / self.req.glb_bytes_per_cycle)
            + (fetch_steps * self.req.dram_latency_cycles) as f64;
        // Without PSum ping-pong, a super tile's drains must finish before
        // the next one starts; only the last phase hides them.
        let groups: u64 = (0..p)
            .map(|d| tile[d].div_ceil(factors[d]) as u64)
            .product();
        let slots = groups << self.req.x_bits;
        let supers: u64 = n_super.iter().product();
        let tp: u64 = tile[p..].iter().map(|&t| t as u64).product();
        let drain = (out / supers) as f64 / self.req.dram_bytes_per_cycle;
        let hidden = (groups * tp / sharing.phases as u64) as f64;
        let blocking = if 2 * slots > self.req.budget.psum_words {
            supers
        } else {
            1
        };
        let exposed = blocking as f64 * (drain - hidden).max(0.0);
        // Nothing computes until the first step has landed.
        let startup = (first_words * self.req.word_bytes) as f64 / self.req.dram_bytes_per_cycle
            + self.req.dram_latency_cycles as f64;
        // Each ownership hand-off refills the forwarding chains.
        let handoffs = match sharing.split_index {
            Some(s) if sharing.phases > 1 => steps * sharing.phases.min(tile[s]) as u64,
            _ => 0,
        };
        let refill = (handoffs * (self.req.mesh.0 + self.req.mesh.1) as u64) as f64 / 2.0;
        Cost {
            cycles: (compute as f64 + exposed + startup + refill)
                .max(mem)
                .ceil() as u64,
            dram_bytes,
        }
    }

    /// Factorizations of this tile that fit the PSum buffer, cheapest first.
    fn ranked_factors(
        &self,
        scheme: &TileScheme,
        sharing: &SharingPlan,
    ) -> Vec<(Cost, Vec<usize>)> {
        let p = self.w.parallel_count;
        let lanes = 1u64 << self.req.x_bits;
        let mut v: Vec<(Cost, Vec<usize>)> = factorizations(p, &scheme.extents, self.req.x_bits)
            .into_iter()
            .filter(|(f, _)| {
                let groups: u64 = (0..p)
                    .map(|d| scheme.extents[d].div_ceil(f[d]) as u64)
                    .product();
                groups * lanes <= self.req.budget.psum_words
            })
            .map(|(f, _)| (self.cost(scheme, &f, sharing), f))
            .collect();
        v.sort();
        v
    }

    fn lower(
        &self,
        scheme: &TileScheme,
        ranked: &[(Cost, Vec<usize>)],
    ) -> Option<(Cost, TeuProgram)> {
        let cap = self
            .req
            .budget
            .per_operand_words
            .unwrap_or(self.req.budget.input_words);
        for (cost, f) in ranked {
            for order in lane_orders(f) {
                if let Ok(prog) = lower_with_capacity(self.w, scheme, &order, cap, self.req.x_bits)
                {
                    return Some((*cost, prog));
                }
            }
        }
        None
    }
}

pub fn plan_vectormesh(w: &Workload, req: &PlanRequest) -> Result<VmPlan, ScheduleError> {
    let assignment = req.assignment.unwrap_or_else(|| default_assignment(w));
    assignment.validate(w)?;
    let est = Estimator { w, req, assignment };

    if let Some(tile) = &req.tile {
        let scheme = TileScheme::for_extents(w, tile)?;
        scheme.check_fits(&req.budget)?;
        let sharing = sharing_axes(w, &scheme, req.mesh, assignment)?;
        let ranked = est.ranked_factors(&scheme, &sharing);
        if ranked.is_empty() {
            return Err(ScheduleError::Capacity {
                what: "psum lane slots",
                need: scheme.psum_footprint.next_multiple_of(1 << req.x_bits),
                have: req.budget.psum_words,
            });
        }
        let (cost, program) = est
            .lower(&scheme, &ranked)
            .ok_or_else(|| ScheduleError::NoLowering(scheme.extents.clone()))?;
        return Ok(VmPlan {
            scheme,
            program,
            sharing,
            est_cycles: cost.cycles,
            est_dram_bytes: cost.dram_bytes,
        });
    }

    // Optimistic score per candidate.
    // Ties go to lower words/MAC, then larger tiles.
    type Key = (Cost, Ratio<u64>, Reverse<u64>, Vec<usize>, bool);
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    let mut failed = None;
    for_each_fitting(w, &req.budget, req.space, |ext, _| {
        let scheme = match TileScheme::for_extents(w, ext) {
            Ok(s) => s,
            Err(e) => {
                failed = Some(e);
                return;
            }
        };
        let Ok(sharing) = sharing_axes(w, &scheme, req.mesh, assignment) else {
            return;
        };
        if let Some((cost, _)) = est.ranked_factors(&scheme, &sharing).first() {
            heap.push(Reverse((
                *cost,
                scheme.bandwidth_per_mac,
                Reverse(scheme.macs_per_tile()),
                ext.to_vec(),
                false,
            )));
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    if heap.is_empty() {
        return Err(ScheduleError::NoFeasibleTile(req.budget));
    }
    while let Some(Reverse((cost, bw, macs, ext, resolved))) = heap.pop() {
        let scheme = TileScheme::for_extents(w, &ext)?;
        let sharing = sharing_axes(w, &scheme, req.mesh, assignment)?;
        let ranked = est.ranked_factors(&scheme, &sharing);
        let Some((real, program)) = est.lower(&scheme, &ranked) else {
            continue;
        };
        let beaten = heap
            .peek()
            .is_some_and(|Reverse((c, b, m, e, _))| (c, b, m, e) < (&real, &bw, &macs, &ext));
        if resolved || !beaten || real == cost {
            return Ok(VmPlan {
                scheme,
                program,
                sharing,
                est_cycles: real.cycles,
                est_dram_bytes: real.dram_bytes,
            });
        }
        heap.push(Reverse((real, bw, macs, ext, true)));
    }
    Err(ScheduleError::NoLowering(Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::make_gemm;

    fn req(mesh: (usize, usize)) -> PlanRequest {
        PlanRequest {
            mesh,
            budget: BufferBudget {
                input_words: 4096,
                psum_words: 1280,
                per_operand_words: Some(2048),
            },
            x_bits: 5,
            word_bytes: 2,
            psum_bytes: 4,
            dram_bytes_per_cycle: 32.0,
            glb_bytes_per_cycle: 128.0,
            dram_latency_cycles: 100,
            space: SearchSpace::Restricted,
            tile: None,
            assignment: None,
        }
    }

    #[test]
    fn gemm_plan_is_routable_and_full() {
        let w = make_gemm(64, 64, 64).unwrap();
        let plan = plan_vectormesh(&w, &req((2, 2))).unwrap();
        assert_eq!(plan.program.lanes.lanes(), 32);
        assert!(plan.program.lane_utilization > 0.99);
        assert!(plan.program.psum_slots() <= 1280);
        let macs = w.macs() / 128;
        assert!(plan.est_cycles >= macs);
    }

    #[test]
    fn tile_override_kept() {
        let w = make_gemm(64, 64, 64).unwrap();
        let mut r = req((1, 1));
        r.tile = Some(vec![16, 32, 8]);
        let plan = plan_vectormesh(&w, &r).unwrap();
        assert_eq!(plan.scheme.extents, vec![16, 32, 8]);
    }

    #[test]
    fn oversized_override_names_capacity() {
        let w = make_gemm(64, 64, 64).unwrap();
        let mut r = req((1, 1));
        r.tile = Some(vec![64, 64, 64]);
        assert!(matches!(
            plan_vectormesh(&w, &r),
            Err(ScheduleError::Capacity { .. })
        ));
    }
}
