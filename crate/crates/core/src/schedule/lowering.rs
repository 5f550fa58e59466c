//! Lowering a tile to 32-lane PE-group cycles.
//!
//! The parallel face of a tile is covered by lane groups: a factorization
//! assigns a power-of-two lane count `p_d` to each parallel index, and lane
//! `N` decodes mixed-radix into per-index offsets (first listed index in the
//! high bits). One cycle issues one group at one temporal point.

use serde::{Deserialize, Serialize};

use super::{ScheduleError, TileScheme};
use crate::bfn::{lane_offsets, layout_for_lanes, BankLayout};
use crate::workload::Workload;

/// Lane factors as `(ndrange index, factor)`, most significant first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LaneMap {
    pub dims: Vec<(usize, usize)>,
}

impl LaneMap {
    pub fn new(dims: Vec<(usize, usize)>) -> Self {
        LaneMap { dims }
    }

    pub fn lanes(&self) -> usize {
        self.dims.iter().map(|&(_, f)| f).product()
    }

    pub fn factor(&self, d: usize) -> usize {
        self.dims
            .iter()
            .find(|&&(i, _)| i == d)
            .map_or(1, |&(_, f)| f)
    }

    /// Per-index offset of lane `n`, as `(index, delta)` pairs.
    pub fn decode(&self, mut n: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.dims.len()];
        for (k, &(d, f)) in self.dims.iter().enumerate().rev() {
            out[k] = (d, n % f);
            n /= f;
        }
        out
    }

    /// `(index, power)` for each lane bit, least significant bit first.
    pub fn lane_bits(&self) -> Vec<(usize, usize)> {
        let mut bits = Vec::new();
        for &(d, f) in self.dims.iter().rev() {
            let mut p = 1;
            while p < f {
                bits.push((d, p));
                p *= 2;
            }
        }
        bits
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeuProgram {
    pub lanes: LaneMap,
    pub tile: Vec<usize>,
    pub parallel_count: usize,
    /// Lane groups along each parallel index: `ceil(t_d / p_d)`.
    pub groups: Vec<usize>,
    pub temporal_points: u64,
    pub lane_utilization: f64,
    pub layouts: Vec<BankLayout>,
    /// Address offset of each lane relative to lane 0, per operand.
    pub offsets: Vec<Vec<i64>>,
}

impl TeuProgram {
    pub fn group_count(&self) -> usize {
        self.groups.iter().product()
    }

    pub fn cycles_per_tile(&self) -> u64 {
        self.group_count() as u64 * self.temporal_points
    }

    pub fn psum_slots(&self) -> usize {
        self.group_count() * self.lanes.lanes()
    }

    /// Local parallel origin of group `g` (row-major over `groups`).
    pub fn group_origin(&self, mut g: usize) -> Vec<usize> {
        let mut o = vec![0; self.parallel_count];
        for d in (0..self.parallel_count).rev() {
            o[d] = (g % self.groups[d]) * self.lanes.factor(d);
            g /= self.groups[d];
        }
        o
    }

    /// Local parallel point of each lane in group `g`.
    pub fn lane_points(&self, g: usize) -> Vec<Vec<usize>> {
        let origin = self.group_origin(g);
        (0..self.lanes.lanes())
            .map(|n| {
                let mut p = origin.clone();
                for (d, delta) in self.lanes.decode(n) {
                    p[d] += delta;
                }
                p
            })
            .collect()
    }

    /// One full pass over a tile at the origin: per cycle, the buffer
    /// addresses of both operands and the PSum slot of each active lane.
    pub fn cycles<'a>(&'a self, w: &'a Workload) -> impl Iterator<Item = CycleOp> + 'a {
        let p = self.parallel_count;
        let t_ext: Vec<usize> = self.tile[p..].to_vec();
        let groups = self.group_count();
        let lanes = self.lanes.lanes();
        (0..groups).flat_map(move |g| {
            let pts = self.lane_points(g);
            let t_ext = t_ext.clone();
            let mut tidx = vec![0usize; t_ext.len()];
            let mut done = false;
            std::iter::from_fn(move || {
                if done {
                    return None;
                }
                let mut addresses = vec![vec![None; lanes]; 2];
                let mut psum_slots = vec![None; lanes];
                for (n, par) in pts.iter().enumerate() {
                    if par.iter().zip(&self.tile).any(|(&x, &t)| x >= t) {
                        continue;
                    }
                    let mut point = par.clone();
                    point.extend_from_slice(&tidx);
                    for (x, lay) in self.layouts.iter().enumerate() {
                        let coord: Vec<usize> = w.operands[x]
                            .map
                            .matrix
                            .iter()
                            .map(|row| {
                                row.iter()
                                    .zip(&point)
                                    .map(|(&c, &q)| c * q as i64)
                                    .sum::<i64>() as usize
                            })
                            .collect();
                        addresses[x][n] = Some(lay.address(&coord) as u32);
                    }
                    psum_slots[n] = Some(g * lanes + n);
                }
                done = !crate::workload::advance(&mut tidx, &t_ext);
                Some(CycleOp {
                    group: g,
                    addresses,
                    psum_slots,
                })
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleOp {
    pub group: usize,
    pub addresses: Vec<Vec<Option<u32>>>,
    pub psum_slots: Vec<Option<usize>>,
}

/// Tile-box extent of operand `x` per tensor dimension.
pub fn operand_box(w: &Workload, x: usize, tile: &[usize]) -> Vec<usize> {
    let op = &w.operands[x];
    op.map
        .matrix
        .iter()
        .zip(&op.shape)
        .map(|(row, &s)| {
            let span: u64 = row
                .iter()
                .zip(tile)
                .map(|(&c, &t)| c.unsigned_abs() * (t as u64 - 1))
                .sum::<u64>()
                + 1;
            span.min(s as u64) as usize
        })
        .collect()
}

pub fn lower_to_teu(
    w: &Workload,
    scheme: &TileScheme,
    lanes: &LaneMap,
) -> Result<TeuProgram, ScheduleError> {
    lower_with_capacity(w, scheme, lanes, u64::MAX >> 1, 5)
}

pub fn lower_with_capacity(
    w: &Workload,
    scheme: &TileScheme,
    lanes: &LaneMap,
    operand_capacity_words: u64,
    x_bits: u32,
) -> Result<TeuProgram, ScheduleError> {
    let p = w.parallel_count;
    if lanes.lanes() != 1 << x_bits {
        return Err(ScheduleError::Factorization(format!(
            "lane factors multiply to {}, not {}",
            lanes.lanes(),
            1 << x_bits
        )));
    }
    let mut seen = vec![false; w.rank()];
    for &(d, f) in &lanes.dims {
        if d >= p {
            return Err(ScheduleError::Factorization(format!(
                "index {d} is temporal"
            )));
        }
        if seen[d] {
            return Err(ScheduleError::Factorization(format!(
                "index {d} listed twice"
            )));
        }
        seen[d] = true;
        if !f.is_power_of_two() {
            return Err(ScheduleError::Factorization(format!(
                "factor {f} of index {d} is not a power of two"
            )));
        }
    }
    let tile = &scheme.extents;
    let groups: Vec<usize> = (0..p).map(|d| tile[d].div_ceil(lanes.factor(d))).collect();
    let group_count: usize = groups.iter().product();
    let face: u64 = tile[..p].iter().map(|&t| t as u64).product();
    let temporal_points: u64 = tile[p..].iter().map(|&t| t as u64).product();
    let bits = lanes.lane_bits();
    // Lanes that fall inside the tile in group 0; later groups use subsets.
    let mut mask = 0u64;
    for n in 0..lanes.lanes() {
        if lanes.decode(n).iter().all(|&(d, delta)| delta < tile[d]) {
            mask |= 1 << n;
        }
    }
    let mut layouts = Vec::with_capacity(2);
    let mut offsets = Vec::with_capacity(2);
    for x in 0..2 {
        let matrix = &w.operands[x].map.matrix;
        let deltas: Vec<Vec<i64>> = bits
            .iter()
            .map(|&(d, pw)| matrix.iter().map(|row| row[d] * pw as i64).collect())
            .collect();
        let shape = operand_box(w, x, tile);
        let lay = layout_for_lanes(&shape, &deltas, mask, operand_capacity_words, x_bits).map_err(
            |_| ScheduleError::Unroutable {
                operand: w.operands[x].name.clone(),
                lanes: lanes.clone(),
            },
        )?;
        let coeffs = lay
            .lane_coefficients(&deltas)
            .expect("layout search keeps patterns affine");
        offsets.push(lane_offsets(&coeffs));
        layouts.push(lay);
    }
    Ok(TeuProgram {
        lanes: lanes.clone(),
        tile: tile.clone(),
        parallel_count: p,
        groups,
        temporal_points,
        lane_utilization: face as f64 / (group_count as u64 * (1u64 << x_bits)) as f64,
        layouts,
        offsets,
    })
}

/// All power-of-two lane factorizations of `2^x_bits` over the parallel
/// indices, each with its lane utilization on `tile`, best first.
pub fn factorizations(p: usize, tile: &[usize], x_bits: u32) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut exps = vec![0u32; p];
    fn rec(
        d: usize,
        left: u32,
        exps: &mut Vec<u32>,
        tile: &[usize],
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        let p = exps.len();
        if d + 1 == p {
            exps[d] = left;
            let f: Vec<usize> = exps.iter().map(|&e| 1usize << e).collect();
            let mut used = 1f64;
            let mut slots = 1f64;
            for k in 0..p {
                used *= tile[k] as f64;
                slots *= (tile[k].div_ceil(f[k]) * f[k]) as f64;
            }
            out.push((f, used / slots));
            return;
        }
        for e in 0..=left {
            exps[d] = e;
            rec(d + 1, left - e, exps, tile, out);
        }
    }
    if p == 0 {
        return out;
    }
    rec(0, x_bits, &mut exps, tile, &mut out);
    // Prefer fewer wasted lanes, then fewer distinct lane indices.
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then(nonunit(&a.0).cmp(&nonunit(&b.0)))
            .then(a.0.cmp(&b.0))
    });
    out
}

fn nonunit(f: &[usize]) -> usize {
    f.iter().filter(|&&x| x > 1).count()
}

/// Lane orders to try for a factorization: every permutation of the
/// non-unit indices.
pub fn lane_orders(factors: &[usize]) -> Vec<LaneMap> {
    let dims: Vec<(usize, usize)> = factors
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 1)
        .map(|(d, &f)| (d, f))
        .collect();
    let mut out = Vec::new();
    permute(&mut dims.clone(), 0, &mut out);
    if out.is_empty() {
        out.push(LaneMap::new(vec![]));
    }
    out
}

fn permute(v: &mut Vec<(usize, usize)>, k: usize, out: &mut Vec<LaneMap>) {
    if k == v.len() {
        out.push(LaneMap::new(v.clone()));
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, out);
        v.swap(k, i);
    }
}

/// Highest-utilization routable lowering of `scheme`.
pub fn best_lowering(
    w: &Workload,
    scheme: &TileScheme,
    operand_capacity_words: u64,
    psum_words: u64,
    x_bits: u32,
) -> Result<TeuProgram, ScheduleError> {
    let p = w.parallel_count;
    for (f, _) in factorizations(p, &scheme.extents, x_bits) {
        let groups: u64 = (0..p)
            .map(|d| scheme.extents[d].div_ceil(f[d]) as u64)
            .product();
        if groups << x_bits > psum_words {
            continue;
        }
        for order in lane_orders(&f) {
            if let Ok(prog) = lower_with_capacity(w, scheme, &order, operand_capacity_words, x_bits)
            {
                return Ok(prog);
            }
        }
    }
    Err(ScheduleError::NoLowering(scheme.extents.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::make_gemm;

    #[test]
    fn gemm_4x8_on_8x16_face() {
        let w = make_gemm(8, 16, 4).unwrap();
        let t = TileScheme::for_extents(&w, &[8, 16, 4]).unwrap();
        let prog = lower_to_teu(&w, &t, &LaneMap::new(vec![(0, 4), (1, 8)])).unwrap();
        assert_eq!(prog.group_count(), 8 * 16 / 32);
        assert_eq!(prog.cycles_per_tile(), 4 * 4);
        assert_eq!(prog.lane_utilization, 1.0);
    }

    #[test]
    fn face_of_32_one_cycle_per_temporal_point() {
        let w = make_gemm(4, 8, 5).unwrap();
        let t = TileScheme::for_extents(&w, &[4, 8, 5]).unwrap();
        let prog = lower_to_teu(&w, &t, &LaneMap::new(vec![(0, 4), (1, 8)])).unwrap();
        assert_eq!(prog.cycles_per_tile(), 5);
    }

    #[test]
    fn factorization_invariance_of_work() {
        let w = make_gemm(32, 32, 3).unwrap();
        let t = TileScheme::for_extents(&w, &[32, 32, 3]).unwrap();
        let a = lower_to_teu(&w, &t, &LaneMap::new(vec![(0, 32)])).unwrap();
        let b = lower_to_teu(&w, &t, &LaneMap::new(vec![(1, 32)])).unwrap();
        let macs = |p: &TeuProgram| {
            p.cycles(&w)
                .map(|c| c.psum_slots.iter().flatten().count())
                .sum::<usize>()
        };
        assert_eq!(macs(&a), 32 * 32 * 3);
        assert_eq!(macs(&b), 32 * 32 * 3);
    }

    #[test]
    fn bad_factorizations_rejected() {
        let w = make_gemm(8, 8, 8).unwrap();
        let t = TileScheme::for_extents(&w, &[8, 8, 8]).unwrap();
        assert!(lower_to_teu(&w, &t, &LaneMap::new(vec![(0, 4), (1, 4)])).is_err());
        assert!(lower_to_teu(&w, &t, &LaneMap::new(vec![(2, 32)])).is_err());
    }

    #[test]
    fn lane_decode_msb_first() {
        let m = LaneMap::new(vec![(0, 4), (1, 8)]);
        assert_eq!(m.decode(13), vec![(0, 1), (1, 5)]);
        assert_eq!(m.lane_bits()[0], (1, 1));
        assert_eq!(m.lane_bits()[3], (0, 1));
    }

    #[test]
    fn factorizations_cover_all_splits() {
        let f = factorizations(2, &[8, 16], 5);
        assert_eq!(f.len(), 6);
        assert_eq!(f[0].1, 1.0);
        assert!(f.iter().all(|(v, _)| v.iter().product::<usize>() == 32));
    }
}
