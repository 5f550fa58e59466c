//! Rectangular tiling of the NDRange and the words-per-MAC cost.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::ScheduleError;
use crate::workload::Workload;

/// Buffer capacities a tile must fit, in words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferBudget {
    pub input_words: u64,
    pub psum_words: u64,
    /// Cap on each operand's own footprint (one physical buffer per operand).
    pub per_operand_words: Option<u64>,
}

impl BufferBudget {
    pub fn new(input_words: u64, psum_words: u64) -> Self {
        BufferBudget {
            input_words,
            psum_words,
            per_operand_words: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    /// Divisors of each extent plus powers of two.
    Restricted,
    /// Every extent from 1 to the full range.
    Exhaustive,
    /// Exhaustive when the candidate count is small, else restricted.
    Auto,
}

const AUTO_EXHAUSTIVE_LIMIT: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileScheme {
    pub extents: Vec<usize>,
    pub input_footprints: Vec<u64>,
    pub psum_footprint: u64,
    #[serde(with = "ratio_text")]
    pub bandwidth_per_mac: Ratio<u64>,
}

impl TileScheme {
    pub fn for_extents(w: &Workload, extents: &[usize]) -> Result<Self, ScheduleError> {
        if extents.len() != w.rank() {
            return Err(ScheduleError::TileRank {
                got: extents.len(),
                want: w.rank(),
            });
        }
        for (d, (&t, &e)) in extents.iter().zip(w.extents()).enumerate() {
            if t == 0 || t > e {
                return Err(ScheduleError::TileExtent {
                    index: d,
                    tile: t,
                    extent: e,
                });
            }
        }
        let input_footprints: Vec<u64> = (0..2).map(|x| footprint(w, x, extents)).collect();
        let psum_footprint = extents[..w.parallel_count]
            .iter()
            .map(|&t| t as u64)
            .product();
        let macs: u64 = extents.iter().map(|&t| t as u64).product();
        Ok(TileScheme {
            extents: extents.to_vec(),
            bandwidth_per_mac: Ratio::new(input_footprints.iter().sum(), macs),
            input_footprints,
            psum_footprint,
        })
    }

    pub fn macs_per_tile(&self) -> u64 {
        self.extents.iter().map(|&t| t as u64).product()
    }

    pub fn input_words(&self) -> u64 {
        self.input_footprints.iter().sum()
    }

    /// First violated capacity, if any.
    pub fn check_fits(&self, b: &BufferBudget) -> Result<(), ScheduleError> {
        if self.input_words() > b.input_words {
            return Err(ScheduleError::Capacity {
                what: "input buffer",
                need: self.input_words(),
                have: b.input_words,
            });
        }
        if let Some(cap) = b.per_operand_words {
            for &f in &self.input_footprints {
                if f > cap {
                    return Err(ScheduleError::Capacity {
                        what: "operand buffer",
                        need: f,
                        have: cap,
                    });
                }
            }
        }
        if self.psum_footprint > b.psum_words {
            return Err(ScheduleError::Capacity {
                what: "psum buffer",
                need: self.psum_footprint,
                have: b.psum_words,
            });
        }
        Ok(())
    }

    /// Number of tiles along each index (edge tiles included).
    pub fn tile_counts(&self, w: &Workload) -> Vec<usize> {
        self.extents
            .iter()
            .zip(w.extents())
            .map(|(&t, &e)| e.div_ceil(t))
            .collect()
    }
}

/// Bounding-box word count of operand `x` over a tile box of `extents`.
pub fn footprint(w: &Workload, x: usize, extents: &[usize]) -> u64 {
    let op = &w.operands[x];
    op.map
        .matrix
        .iter()
        .zip(&op.shape)
        .map(|(row, &s)| {
            let span: u64 = row
                .iter()
                .zip(extents)
                .map(|(&c, &t)| c.unsigned_abs() * (t as u64 - 1))
                .sum::<u64>()
                + 1;
            span.min(s as u64)
        })
        .product()
}

fn candidates(extent: usize, space: SearchSpace) -> Vec<usize> {
    match space {
        SearchSpace::Exhaustive | SearchSpace::Auto => (1..=extent).collect(),
        SearchSpace::Restricted => {
            let mut v: Vec<usize> = (1..=extent).filter(|t| extent % t == 0).collect();
            let mut p = 1;
            while p <= extent {
                v.push(p);
                p *= 2;
            }
            v.sort_unstable();
            v.dedup();
            v
        }
    }
}

fn resolve_space(w: &Workload, space: SearchSpace) -> SearchSpace {
    match space {
        SearchSpace::Auto => {
            let n = w
                .extents()
                .iter()
                .try_fold(1u64, |acc, &e| acc.checked_mul(e as u64));
            match n {
                Some(n) if n <= AUTO_EXHAUSTIVE_LIMIT => SearchSpace::Exhaustive,
                _ => SearchSpace::Restricted,
            }
        }
        s => s,
    }
}

/// Visits every fitting candidate tile as `(extents, footprints)`.
pub(crate) fn for_each_fitting<F: FnMut(&[usize], &[u64; 2])>(
    w: &Workload,
    budget: &BufferBudget,
    space: SearchSpace,
    mut f: F,
) {
    let space = resolve_space(w, space);
    let cands: Vec<Vec<usize>> = w.extents().iter().map(|&e| candidates(e, space)).collect();
    let rank = cands.len();
    let p = w.parallel_count;
    let mut idx = vec![0usize; rank];
    let mut ext: Vec<usize> = cands.iter().map(|c| c[0]).collect();
    loop {
        let psum: u64 = ext[..p].iter().map(|&t| t as u64).product();
        if psum <= budget.psum_words {
            let fp = [footprint(w, 0, &ext), footprint(w, 1, &ext)];
            let per_ok = budget
                .per_operand_words
                .map_or(true, |c| fp[0] <= c && fp[1] <= c);
            if per_ok && fp[0] + fp[1] <= budget.input_words {
                f(&ext, &fp);
            }
        }
        // Odometer over candidate lists.
        let mut d = rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < cands[d].len() {
                ext[d] = cands[d][idx[d]];
                break;
            }
            idx[d] = 0;
            ext[d] = cands[d][0];
        }
    }
}

pub fn enumerate_tiles(
    w: &Workload,
    input_buf_words: u64,
    psum_buf_words: u64,
) -> Result<Vec<TileScheme>, ScheduleError> {
    enumerate_tiles_in(
        w,
        &BufferBudget::new(input_buf_words, psum_buf_words),
        SearchSpace::Auto,
    )
}

pub fn enumerate_tiles_in(
    w: &Workload,
    budget: &BufferBudget,
    space: SearchSpace,
) -> Result<Vec<TileScheme>, ScheduleError> {
    check_budget(budget)?;
    let mut out = Vec::new();
    for_each_fitting(w, budget, space, |ext, _| {
        out.push(TileScheme::for_extents(w, ext).expect("candidate within extents"));
    });
    if out.is_empty() {
        return Err(ScheduleError::NoFeasibleTile(*budget));
    }
    Ok(out)
}

fn check_budget(b: &BufferBudget) -> Result<(), ScheduleError> {
    if b.input_words == 0 || b.psum_words == 0 || b.per_operand_words == Some(0) {
        return Err(ScheduleError::ZeroBuffer);
    }
    Ok(())
}

/// Strict preference of tile `a` over `b`: lower words/MAC, then more MACs,
/// then lexicographically smaller extents.
pub fn better(a: (&[usize], u64, u64), b: (&[usize], u64, u64)) -> bool {
    let (ea, na, ma) = a;
    let (eb, nb, mb) = b;
    let lhs = na as u128 * mb as u128;
    let rhs = nb as u128 * ma as u128;
    if lhs != rhs {
        return lhs < rhs;
    }
    if ma != mb {
        return ma > mb;
    }
    ea < eb
}

pub fn select_tile(
    w: &Workload,
    input_buf_words: u64,
    psum_buf_words: u64,
) -> Result<TileScheme, ScheduleError> {
    select_tile_in(
        w,
        &BufferBudget::new(input_buf_words, psum_buf_words),
        SearchSpace::Auto,
    )
}

pub fn select_tile_in(
    w: &Workload,
    budget: &BufferBudget,
    space: SearchSpace,
) -> Result<TileScheme, ScheduleError> {
    check_budget(budget)?;
    let mut best: Option<(Vec<usize>, u64, u64)> = None;
    for_each_fitting(w, budget, space, |ext, fp| {
        let num = fp[0] + fp[1];
        let macs: u64 = ext.iter().map(|&t| t as u64).product();
        let take = match &best {
            None => true,
            Some((e, n, m)) => better((ext, num, macs), (e, *n, *m)),
        };
        if take {
            best = Some((ext.to_vec(), num, macs));
        }
    });
    let (ext, _, _) = best.ok_or(ScheduleError::NoFeasibleTile(*budget))?;
    TileScheme::for_extents(w, &ext)
}

pub(crate) mod ratio_text {
    use num_rational::Ratio;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Ratio<u64>, D::Error> {
        let s = String::deserialize(d)?;
        let (n, m) = s
            .split_once('/')
            .ok_or_else(|| D::Error::custom("expected `numer/denom`"))?;
        let n: u64 = n.trim().parse().map_err(D::Error::custom)?;
        let m: u64 = m.trim().parse().map_err(D::Error::custom)?;
        if m == 0 {
            return Err(D::Error::custom("zero denominator"));
        }
        Ok(Ratio::new(n, m))
    }
}
