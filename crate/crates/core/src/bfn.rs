//! Banked buffer access and butterfly routing.
//!
//! A TEU reads 2^X words per cycle from a 2^X-bank buffer through an X-stage
//! butterfly. Stage `s` resolves destination bit `X-1-s` (MSB first). A switch
//! may copy one input to both outputs, so equal-address lanes are served by
//! multicast.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_X: u32 = 5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BfnError {
    #[error("coefficient o_{index} = {value} is even")]
    EvenCoefficient { index: usize, value: i64 },
    #[error("expected {want} coefficients, got {got}")]
    CoefficientCount { want: usize, got: usize },
    #[error("address {addr} negative or beyond capacity {capacity}")]
    AddressRange { addr: i64, capacity: u64 },
    #[error("lanes {a} and {b} hit bank {bank} at different addresses")]
    BankConflict { a: usize, b: usize, bank: u32 },
    #[error("stage {stage} link {link} needed by banks {first} and {second}")]
    LinkConflict {
        stage: u32,
        link: u32,
        first: u32,
        second: u32,
    },
    #[error("lane count {got} is not 2^{x}")]
    LaneCount { got: usize, x: u32 },
    #[error("no padded/shuffled layout makes the pattern routable")]
    NoLayout,
    #[error("lane {lane} received {got:?}, expected {want}")]
    Delivery {
        lane: usize,
        got: Option<u32>,
        want: u32,
    },
}

/// One cycle's request: a word address per lane, `None` for idle lanes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BankAccess {
    pub addresses: Vec<Option<u32>>,
    pub x_bits: u32,
}

impl BankAccess {
    pub fn new(addresses: Vec<Option<u32>>, x_bits: u32) -> Result<Self, BfnError> {
        if addresses.len() != 1usize << x_bits {
            return Err(BfnError::LaneCount {
                got: addresses.len(),
                x: x_bits,
            });
        }
        Ok(BankAccess { addresses, x_bits })
    }

    pub fn dense(addresses: &[u32], x_bits: u32) -> Result<Self, BfnError> {
        Self::new(addresses.iter().map(|&a| Some(a)).collect(), x_bits)
    }

    pub fn lanes(&self) -> usize {
        self.addresses.len()
    }

    pub fn bank(&self, addr: u32) -> u32 {
        addr & ((1 << self.x_bits) - 1)
    }

    pub fn check_capacity(&self, capacity_words: u64) -> Result<(), BfnError> {
        for a in self.addresses.iter().flatten() {
            if *a as u64 >= capacity_words {
                return Err(BfnError::AddressRange {
                    addr: *a as i64,
                    capacity: capacity_words,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictReport {
    pub conflict_free: bool,
    /// Bank serving each lane.
    pub bank_of_lane: Vec<Option<u32>>,
    /// Address read from each bank this cycle.
    pub bank_address: Vec<Option<u32>>,
    pub first_conflict: Option<(usize, usize, u32)>,
}

impl ConflictReport {
    /// Lane-to-bank permutation when every lane hits a distinct bank.
    pub fn permutation(&self) -> Option<Vec<u32>> {
        if !self.conflict_free {
            return None;
        }
        let banks: Vec<u32> = self
            .bank_of_lane
            .iter()
            .map(|b| b.unwrap_or(u32::MAX))
            .collect();
        let mut seen = vec![false; banks.len()];
        for &b in &banks {
            if b == u32::MAX || seen[b as usize] {
                return None;
            }
            seen[b as usize] = true;
        }
        Some(banks)
    }
}

/// Conflict-free iff every bank is asked for at most one distinct address.
pub fn check_conflict_free(a: &BankAccess) -> ConflictReport {
    let nb = 1usize << a.x_bits;
    let mut bank_address: Vec<Option<u32>> = vec![None; nb];
    let mut owner = vec![usize::MAX; nb];
    let mut bank_of_lane = vec![None; a.lanes()];
    let mut first_conflict = None;
    for (lane, addr) in a.addresses.iter().enumerate() {
        let Some(addr) = *addr else { continue };
        let b = a.bank(addr);
        bank_of_lane[lane] = Some(b);
        match bank_address[b as usize] {
            None => {
                bank_address[b as usize] = Some(addr);
                owner[b as usize] = lane;
            }
            Some(prev) if prev != addr => {
                if first_conflict.is_none() {
                    first_conflict = Some((owner[b as usize], lane, b));
                }
            }
            _ => {}
        }
    }
    ConflictReport {
        conflict_free: first_conflict.is_none(),
        bank_of_lane,
        bank_address,
        first_conflict,
    }
}

/// `A_N = A_0 + Σ_i 2^i · o_i · b_i(N)` for N in 0..2^X.
pub fn odd_stride_addresses(a0: u32, coeffs: &[i64], x_bits: u32) -> Result<BankAccess, BfnError> {
    if coeffs.len() != x_bits as usize {
        return Err(BfnError::CoefficientCount {
            want: x_bits as usize,
            got: coeffs.len(),
        });
    }
    if let Some((index, &value)) = coeffs.iter().enumerate().find(|(_, &o)| o % 2 == 0) {
        return Err(BfnError::EvenCoefficient { index, value });
    }
    let n = 1usize << x_bits;
    let mut addrs = Vec::with_capacity(n);
    for lane in 0..n {
        let mut a = a0 as i64;
        for (i, &o) in coeffs.iter().enumerate() {
            if lane >> i & 1 == 1 {
                a += (1i64 << i) * o;
            }
        }
        if a < 0 || a > u32::MAX as i64 {
            return Err(BfnError::AddressRange {
                addr: a,
                capacity: u32::MAX as u64,
            });
        }
        addrs.push(Some(a as u32));
    }
    BankAccess::new(addrs, x_bits)
}

/// Switch settings: `stages[s][link]` is `Some(cross)` for a driven output link.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Routing {
    pub x_bits: u32,
    pub stages: Vec<Vec<Option<bool>>>,
}

impl Routing {
    pub fn active_links(&self) -> usize {
        self.stages.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Computes butterfly switch settings for a conflict-free access.
pub fn route(a: &BankAccess) -> Result<Routing, BfnError> {
    let rep = check_conflict_free(a);
    if let Some((x, y, bank)) = rep.first_conflict {
        return Err(BfnError::BankConflict { a: x, b: y, bank });
    }
    let x = a.x_bits;
    let n = 1usize << x;
    let mut stages = vec![vec![None; n]; x as usize];
    let mut link_src = vec![u32::MAX; n];
    for s in 0..x {
        let bit = x - 1 - s;
        let high: u32 = ((1u32 << x) - 1) & !((1u32 << bit) - 1);
        link_src.iter_mut().for_each(|v| *v = u32::MAX);
        for (lane, b) in rep.bank_of_lane.iter().enumerate() {
            let Some(src) = *b else { continue };
            let dest = lane as u32;
            let out = (dest & high) | (src & !high);
            let held = &mut link_src[out as usize];
            if *held == u32::MAX {
                *held = src;
                let input = out ^ (((dest ^ src) >> bit & 1) << bit);
                stages[s as usize][out as usize] = Some(input != out);
            } else if *held != src {
                return Err(BfnError::LinkConflict {
                    stage: s,
                    link: out,
                    first: *held,
                    second: src,
                });
            }
        }
    }
    Ok(Routing { x_bits: x, stages })
}

/// Pushes the per-bank words through the switch settings.
pub fn deliver(r: &Routing, bank_words: &[Option<u32>]) -> Vec<Option<u32>> {
    let mut vals = bank_words.to_vec();
    let mut next = vec![None; vals.len()];
    for (s, stage) in r.stages.iter().enumerate() {
        let bit = r.x_bits - 1 - s as u32;
        for (out, set) in stage.iter().enumerate() {
            next[out] = set.and_then(|cross| {
                let input = if cross { out ^ (1 << bit) } else { out };
                vals[input]
            });
        }
        std::mem::swap(&mut vals, &mut next);
    }
    vals
}

/// Routes `a`, simulates the network with word value = address, and checks
/// every active lane receives its own address.
pub fn verify_routing(a: &BankAccess) -> Result<Routing, BfnError> {
    let r = route(a)?;
    let rep = check_conflict_free(a);
    let got = deliver(&r, &rep.bank_address);
    for (lane, want) in a.addresses.iter().enumerate() {
        if let Some(want) = *want {
            if got[lane] != Some(want) {
                return Err(BfnError::Delivery {
                    lane,
                    got: got[lane],
                    want,
                });
            }
        }
    }
    Ok(r)
}

/// Tile-tensor placement: optional stride-phase deinterleave per dimension
/// and an odd-pitch pad, row-major over the padded extents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankLayout {
    pub shape: Vec<usize>,
    pub interleave: Vec<usize>,
    pub pad: Vec<usize>,
    pub pitches: Vec<u64>,
    pub x_bits: u32,
    phase_offsets: Vec<Vec<usize>>,
}

impl BankLayout {
    pub fn new(shape: &[usize], interleave: &[usize], pad: &[usize], x_bits: u32) -> Self {
        let r = shape.len();
        let mut pitches = vec![1u64; r];
        for d in (0..r.saturating_sub(1)).rev() {
            pitches[d] = pitches[d + 1] * (shape[d + 1] + pad[d + 1]) as u64;
        }
        let phase_offsets = shape
            .iter()
            .zip(interleave)
            .map(|(&e, &f)| {
                let mut acc = 0;
                (0..f)
                    .map(|ph| {
                        let o = acc;
                        acc += if e > ph { (e - ph).div_ceil(f) } else { 0 };
                        o
                    })
                    .collect()
            })
            .collect();
        BankLayout {
            shape: shape.to_vec(),
            interleave: interleave.to_vec(),
            pad: pad.to_vec(),
            pitches,
            x_bits,
            phase_offsets,
        }
    }

    pub fn identity(shape: &[usize], x_bits: u32) -> Self {
        let n = shape.len();
        Self::new(shape, &vec![1; n], &vec![0; n], x_bits)
    }

    #[inline]
    pub fn position(&self, dim: usize, x: usize) -> usize {
        let f = self.interleave[dim];
        if f == 1 {
            x
        } else {
            self.phase_offsets[dim][x % f] + x / f
        }
    }

    #[inline]
    pub fn address(&self, coord: &[usize]) -> u64 {
        coord
            .iter()
            .enumerate()
            .map(|(d, &x)| self.pitches[d] * self.position(d, x) as u64)
            .sum()
    }

    pub fn size_words(&self) -> u64 {
        match self.shape.first() {
            None => 1,
            Some(&e) => self.pitches[0] * (e + self.pad[0]) as u64,
        }
    }

    pub fn live_words(&self) -> u64 {
        self.shape.iter().map(|&e| e as u64).product()
    }

    pub fn padding_words(&self) -> u64 {
        self.size_words() - self.live_words()
    }

    /// Innermost rows of live data (one per index of the outer dims).
    pub fn rows(&self) -> u64 {
        self.shape
            .iter()
            .take(self.shape.len().saturating_sub(1))
            .map(|&e| e as u64)
            .product::<u64>()
            .max(1)
    }

    pub fn bank(&self, addr: u64) -> u32 {
        (addr & ((1 << self.x_bits) - 1)) as u32
    }

    pub fn row(&self, addr: u64) -> u64 {
        addr >> self.x_bits
    }

    /// Per-lane-bit address coefficients for the given coordinate deltas, if
    /// the pattern stays affine under this layout.
    pub fn lane_coefficients(&self, lane_deltas: &[Vec<i64>]) -> Option<Vec<i64>> {
        let mut out = Vec::with_capacity(lane_deltas.len());
        for delta in lane_deltas {
            let mut c = 0i64;
            for (d, &dx) in delta.iter().enumerate() {
                let f = self.interleave[d] as i64;
                if dx % f != 0 {
                    return None;
                }
                c += self.pitches[d] as i64 * (dx / f);
            }
            out.push(c);
        }
        Some(out)
    }
}

/// Lane offsets from per-bit coefficients: `off(N) = Σ_L c_L · bit_L(N)`.
pub fn lane_offsets(coeffs: &[i64]) -> Vec<i64> {
    let n = 1usize << coeffs.len();
    (0..n)
        .map(|lane| {
            coeffs
                .iter()
                .enumerate()
                .filter(|(l, _)| lane >> l & 1 == 1)
                .map(|(_, c)| c)
                .sum()
        })
        .collect()
}

/// True if the offset pattern is conflict-free and routable from every base
/// residue, with lanes outside `mask` idle.
pub fn pattern_routable(offsets: &[i64], mask: u64, x_bits: u32) -> bool {
    let span = 1i64 << x_bits;
    let min = offsets.iter().copied().min().unwrap_or(0);
    let shift = if min < 0 {
        (-min + span - 1) / span * span
    } else {
        0
    };
    (0..span).all(|res| {
        let addrs = offsets
            .iter()
            .enumerate()
            .map(|(l, &o)| (mask >> l & 1 == 1).then(|| (shift + res + o) as u32))
            .collect();
        match BankAccess::new(addrs, x_bits) {
            Ok(a) => verify_routing(&a).is_ok(),
            Err(_) => false,
        }
    })
}

/// Logical access families produced by TEU lowering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccessFamily {
    /// Lanes walk the innermost dimension with unit stride.
    RowOfMatrix,
    /// All lanes read the same word.
    Broadcast,
    /// Lanes walk dimension `axis` with the given stride.
    StridedWindow { axis: usize, stride: usize },
    /// Explicit coordinate delta per lane bit (`deltas[L][dim]`).
    Lanes(Vec<Vec<i64>>),
}

impl AccessFamily {
    fn deltas(&self, rank: usize, x_bits: u32) -> Vec<Vec<i64>> {
        let bits = x_bits as usize;
        let along = |axis: usize, stride: i64| {
            (0..bits)
                .map(|l| {
                    let mut v = vec![0; rank];
                    v[axis] = stride << l;
                    v
                })
                .collect()
        };
        match self {
            AccessFamily::RowOfMatrix => along(rank - 1, 1),
            AccessFamily::Broadcast => vec![vec![0; rank]; bits],
            AccessFamily::StridedWindow { axis, stride } => along(*axis, *stride as i64),
            AccessFamily::Lanes(d) => d.clone(),
        }
    }
}

/// Smallest-padding layout under which the family is conflict-free and
/// routable for every base residue.
pub fn layout_pad_shuffle(
    shape: &[usize],
    family: &AccessFamily,
    x_bits: u32,
) -> Result<BankLayout, BfnError> {
    let deltas = family.deltas(shape.len(), x_bits);
    layout_for_deltas(shape, &deltas, u64::MAX >> 1, x_bits)
}

/// Layout search over deinterleave factors and single-word pitch pads.
pub fn layout_for_deltas(
    shape: &[usize],
    deltas: &[Vec<i64>],
    capacity_words: u64,
    x_bits: u32,
) -> Result<BankLayout, BfnError> {
    let lanes = 1u32 << deltas.len();
    let mask = u64::MAX >> (64 - lanes);
    layout_for_lanes(shape, deltas, mask, capacity_words, x_bits)
}

/// As [`layout_for_deltas`], checking only the lanes set in `mask`.
pub fn layout_for_lanes(
    shape: &[usize],
    deltas: &[Vec<i64>],
    mask: u64,
    capacity_words: u64,
    x_bits: u32,
) -> Result<BankLayout, BfnError> {
    let rank = shape.len();
    // Deinterleave candidates: the common stride of lane moves on a dim.
    let mut il_choices: Vec<Vec<usize>> = Vec::with_capacity(rank);
    for d in 0..rank {
        let g = deltas
            .iter()
            .map(|v| v[d].unsigned_abs())
            .filter(|&x| x != 0)
            .fold(0u64, gcd);
        let mut c = vec![1];
        if g > 1 && (g as usize) < shape[d] {
            c.push(g as usize);
        }
        il_choices.push(c);
    }
    let mut candidates: Vec<BankLayout> = Vec::new();
    let pad_dims: Vec<usize> = (1..rank).collect();
    let n_il: usize = il_choices.iter().map(|c| c.len()).product();
    for il_code in 0..n_il {
        let mut il = vec![1; rank];
        let mut code = il_code;
        for d in 0..rank {
            il[d] = il_choices[d][code % il_choices[d].len()];
            code /= il_choices[d].len();
        }
        for pad_code in 0..(1usize << pad_dims.len()) {
            let mut pad = vec![0; rank];
            for (b, &d) in pad_dims.iter().enumerate() {
                pad[d] = pad_code >> b & 1;
            }
            let lay = BankLayout::new(shape, &il, &pad, x_bits);
            if lay.padding_words() > lay.rows() || lay.size_words() > capacity_words {
                continue;
            }
            candidates.push(lay);
        }
    }
    candidates.sort_by_key(|l| {
        (
            l.padding_words(),
            l.interleave.iter().filter(|&&f| f > 1).count(),
            l.pad.clone(),
        )
    });
    for lay in candidates {
        let Some(coeffs) = lay.lane_coefficients(deltas) else {
            continue;
        };
        if pattern_routable(&lane_offsets(&coeffs), mask, x_bits) {
            return Ok(lay);
        }
    }
    Err(BfnError::NoLayout)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Memo of verified (pattern, base residue) pairs.
#[derive(Clone, Debug, Default)]
pub struct RouteCache {
    verified: Vec<u64>,
}

impl RouteCache {
    pub fn is_verified(&self, pattern: usize, residue: u32) -> bool {
        self.verified
            .get(pattern)
            .is_some_and(|m| m >> residue & 1 == 1)
    }

    pub fn mark(&mut self, pattern: usize, residue: u32) {
        if self.verified.len() <= pattern {
            self.verified.resize(pattern + 1, 0);
        }
        self.verified[pattern] |= 1 << residue;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_odd_example() {
        let a = odd_stride_addresses(0, &[1, 3], 2).unwrap();
        let addrs: Vec<u32> = a.addresses.iter().map(|x| x.unwrap()).collect();
        assert_eq!(addrs, vec![0, 1, 6, 7]);
        let rep = check_conflict_free(&a);
        assert!(rep.conflict_free);
        let mut banks = rep.permutation().unwrap();
        banks.sort();
        assert_eq!(banks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn broadcast_and_congruent() {
        let a = BankAccess::dense(&[9; 32], 5).unwrap();
        assert!(check_conflict_free(&a).conflict_free);
        assert!(verify_routing(&a).is_ok());
        let b = BankAccess::dense(&[0, 4, 8, 12], 2).unwrap();
        assert!(!check_conflict_free(&b).conflict_free);
        assert!(route(&b).is_err());
    }

    #[test]
    fn even_coefficient_rejected() {
        assert_eq!(
            odd_stride_addresses(0, &[1, 2], 2).unwrap_err(),
            BfnError::EvenCoefficient { index: 1, value: 2 }
        );
    }

    #[test]
    fn unit_stride_rotates_banks() {
        let a = odd_stride_addresses(7, &[1; 5], 5).unwrap();
        let rep = check_conflict_free(&a);
        let perm = rep.permutation().unwrap();
        for (lane, b) in perm.iter().enumerate() {
            assert_eq!(*b, (7 + lane as u32) % 32);
        }
        verify_routing(&a).unwrap();
    }

    #[test]
    fn mixed_coefficients_example() {
        let a = odd_stride_addresses(7, &[3, 1, 1, 1, 1], 5).unwrap();
        assert!(check_conflict_free(&a).permutation().is_some());
        verify_routing(&a).unwrap();
    }

    #[test]
    fn permutation_not_always_routable() {
        // Bit reversal is a permutation but blocks in an MSB-first butterfly.
        let addrs: Vec<u32> = (0..8u32).map(|n| n.reverse_bits() >> 29).collect();
        let a = BankAccess::dense(&addrs, 3).unwrap();
        assert!(check_conflict_free(&a).conflict_free);
        assert!(matches!(route(&a), Err(BfnError::LinkConflict { .. })));
    }

    #[test]
    fn grouped_broadcast_routes() {
        // Groups of 8 equal addresses, stride 3 across groups.
        let addrs: Vec<u32> = (0..32u32).map(|n| 100 + 3 * (n / 8)).collect();
        verify_routing(&BankAccess::dense(&addrs, 5).unwrap()).unwrap();
    }

    #[test]
    fn row_fetch_identity_layout() {
        let lay = layout_pad_shuffle(&[16, 64], &AccessFamily::RowOfMatrix, 5).unwrap();
        assert_eq!(lay.padding_words(), 0);
        assert_eq!(lay.interleave, vec![1, 1]);
        let b = layout_pad_shuffle(&[16, 64], &AccessFamily::Broadcast, 5).unwrap();
        assert_eq!(b.padding_words(), 0);
    }

    #[test]
    fn even_pitch_window_gets_one_word_pad() {
        let shape = [32, 16];
        let fam = AccessFamily::StridedWindow { axis: 0, stride: 1 };
        let lay = layout_pad_shuffle(&shape, &fam, 5).unwrap();
        assert_eq!(lay.pad, vec![0, 1]);
        assert_eq!(lay.pitches[0] % 2, 1);
        assert_eq!(lay.padding_words(), 32);
        for base_col in 0..16 {
            let addrs: Vec<u32> = (0..32)
                .map(|r| lay.address(&[r, base_col]) as u32)
                .collect();
            assert!(check_conflict_free(&BankAccess::dense(&addrs, 5).unwrap()).conflict_free);
        }
    }

    #[test]
    fn stride_four_uses_deinterleave() {
        let shape = [3, 140];
        let fam = AccessFamily::StridedWindow { axis: 1, stride: 4 };
        let lay = layout_pad_shuffle(&shape, &fam, 5).unwrap();
        assert_eq!(lay.interleave[1], 4);
        assert!(lay.padding_words() <= lay.rows());
    }

    #[test]
    fn layout_injective() {
        let lay = BankLayout::new(&[3, 10, 7], &[1, 4, 1], &[0, 1, 0], 5);
        let mut seen = std::collections::HashSet::new();
        for a in 0..3 {
            for b in 0..10 {
                for c in 0..7 {
                    let addr = lay.address(&[a, b, c]);
                    assert!(addr < lay.size_words());
                    assert!(seen.insert(addr));
                }
            }
        }
    }

    #[test]
    fn route_cache_marks() {
        let mut c = RouteCache::default();
        assert!(!c.is_verified(3, 7));
        c.mark(3, 7);
        assert!(c.is_verified(3, 7));
        assert!(!c.is_verified(3, 8));
    }
}
