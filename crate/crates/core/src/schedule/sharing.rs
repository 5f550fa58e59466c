//! Mesh-level data sharing over neighbor FIFOs.
//!
//! A mesh axis distributes one parallel NDRange index across TEUs. An operand
//! whose index map ignores that index is identical on every TEU along the
//! axis, so one TEU owns it for a phase and forwards each vector it reads.
//! Ownership rotates with the phase: phase `p` is owned by column `p mod C`
//! (row-invariant operands, forwarded east/west) and by row `p mod R`
//! (column-invariant operands, forwarded north/south).

use serde::{Deserialize, Serialize};

use super::{ScheduleError, TileScheme};
use crate::workload::Workload;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshAxis {
    /// Along a column: TEUs differing in their row coordinate.
    Rows,
    /// Along a row: TEUs differing in their column coordinate.
    Cols,
}

/// Parallel NDRange index distributed over mesh rows and over mesh columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisAssignment {
    pub rows: usize,
    pub cols: usize,
}

impl AxisAssignment {
    pub fn index(&self, axis: MeshAxis) -> usize {
        match axis {
            MeshAxis::Rows => self.rows,
            MeshAxis::Cols => self.cols,
        }
    }

    pub fn validate(&self, w: &Workload) -> Result<(), ScheduleError> {
        for (axis, d) in [("rows", self.rows), ("cols", self.cols)] {
            if d >= w.parallel_count {
                return Err(ScheduleError::InvalidAssignment(format!(
                    "mesh {axis} mapped to index {d}, which is not a parallel index"
                )));
            }
        }
        if self.rows == self.cols && w.parallel_count > 1 {
            return Err(ScheduleError::InvalidAssignment(
                "mesh rows and cols map to the same index".into(),
            ));
        }
        Ok(())
    }
}

/// The two largest parallel extents; the larger goes to mesh rows.
pub fn default_assignment(w: &Workload) -> AxisAssignment {
    let mut order: Vec<usize> = (0..w.parallel_count).collect();
    order.sort_by(|&a, &b| w.extents()[b].cmp(&w.extents()[a]).then(a.cmp(&b)));
    let rows = order[0];
    let cols = *order.get(1).unwrap_or(&rows);
    AxisAssignment { rows, cols }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandSharing {
    /// Jacobian-zero test against the index on mesh rows / mesh cols.
    pub shareable_rows: bool,
    pub shareable_cols: bool,
    /// Axis the operand is actually forwarded along (at most one operand per axis).
    pub forward: Option<MeshAxis>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    pub mesh_rows: usize,
    pub mesh_cols: usize,
    pub assignment: AxisAssignment,
    pub operands: Vec<OperandSharing>,
    pub phases: usize,
    /// Temporal index whose tile range is cut into one chunk per phase.
    pub split_index: Option<usize>,
}

impl SharingPlan {
    pub fn solo(w: &Workload) -> Self {
        SharingPlan {
            mesh_rows: 1,
            mesh_cols: 1,
            assignment: default_assignment(w),
            operands: vec![
                OperandSharing {
                    shareable_rows: false,
                    shareable_cols: false,
                    forward: None,
                };
                2
            ],
            phases: 1,
            split_index: None,
        }
    }

    pub fn axis_len(&self, axis: MeshAxis) -> usize {
        match axis {
            MeshAxis::Rows => self.mesh_rows,
            MeshAxis::Cols => self.mesh_cols,
        }
    }

    /// Mesh row owning operand `x` in phase `p` (column-invariant operands).
    pub fn owner_row(&self, p: usize) -> usize {
        p % self.mesh_rows
    }

    pub fn owner_col(&self, p: usize) -> usize {
        p % self.mesh_cols
    }

    /// `[lo, hi)` sub-range of a temporal range of length `len` for phase `p`.
    pub fn phase_chunk(&self, len: usize, p: usize) -> (usize, usize) {
        (p * len / self.phases, (p + 1) * len / self.phases)
    }

    /// Stable text form for manifests and hashing.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn sharing_axes(
    w: &Workload,
    scheme: &TileScheme,
    mesh: (usize, usize),
    assignment: AxisAssignment,
) -> Result<SharingPlan, ScheduleError> {
    assignment.validate(w)?;
    let (mesh_rows, mesh_cols) = mesh;
    if mesh_rows == 0 || mesh_cols == 0 {
        return Err(ScheduleError::InvalidAssignment("empty mesh".into()));
    }
    let flags: Vec<(bool, bool)> = w
        .operands
        .iter()
        .map(|op| {
            (
                op.map.invariant_to(assignment.rows),
                op.map.invariant_to(assignment.cols),
            )
        })
        .collect();

    // Pick per-operand forwarding axes, one operand per axis, maximizing the
    // words saved per tile.
    let options = |x: usize| -> Vec<Option<MeshAxis>> {
        let mut v = vec![None];
        if flags[x].0 && mesh_rows > 1 {
            v.push(Some(MeshAxis::Rows));
        }
        if flags[x].1 && mesh_cols > 1 {
            v.push(Some(MeshAxis::Cols));
        }
        v
    };
    let saving = |x: usize, a: Option<MeshAxis>| -> u128 {
        let len = match a {
            None => return 0,
            Some(MeshAxis::Rows) => mesh_rows,
            Some(MeshAxis::Cols) => mesh_cols,
        } as u128;
        scheme.input_footprints[x] as u128 * (len - 1) * 1000 / len
    };
    let mut best = (0u128, [None, None]);
    for a0 in options(0) {
        for a1 in options(1) {
            if a0.is_some() && a0 == a1 {
                continue;
            }
            let s = saving(0, a0) + saving(1, a1);
            if s > best.0 {
                best = (s, [a0, a1]);
            }
        }
    }
    let forward = best.1;

    let mut phases = 1usize;
    for a in forward.iter().flatten() {
        let len = match a {
            MeshAxis::Rows => mesh_rows,
            MeshAxis::Cols => mesh_cols,
        };
        phases = phases / gcd(phases, len) * len;
    }
    let split_index = if phases > 1 {
        choose_split(w, scheme, &forward, phases)
    } else {
        None
    };
    if phases > 1 && split_index.is_none() {
        return Err(ScheduleError::InvalidAssignment(
            "no temporal index to split across phases".into(),
        ));
    }
    Ok(SharingPlan {
        mesh_rows,
        mesh_cols,
        assignment,
        operands: flags
            .iter()
            .zip(forward)
            .map(|(&(r, c), f)| OperandSharing {
                shareable_rows: r,
                shareable_cols: c,
                forward: f,
            })
            .collect(),
        phases,
        split_index,
    })
}

/// Temporal index to cut into phase chunks. Prefers indices that occupy
/// forwarded-operand coordinates alone (so chunk footprints do not overlap)
/// and that are at least `phases` long in the tile.
fn choose_split(
    w: &Workload,
    scheme: &TileScheme,
    forward: &[Option<MeshAxis>; 2],
    phases: usize,
) -> Option<usize> {
    let p = w.parallel_count;
    let clean = |d: usize| {
        forward.iter().enumerate().all(|(x, f)| {
            f.is_none()
                || w.operands[x]
                    .map
                    .matrix
                    .iter()
                    .all(|row| row[d] == 0 || (p..w.rank()).all(|q| q == d || row[q] == 0))
        })
    };
    let temporal: Vec<usize> = (p..w.rank()).collect();
    let key = |d: &usize| (clean(*d), scheme.extents[*d] >= phases, scheme.extents[*d]);
    temporal
        .iter()
        .copied()
        .max_by(|a, b| key(a).cmp(&key(b)).then(b.cmp(a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{make_conv, make_gemm, ConvParams};

    #[test]
    fn gemm_shares_a_along_cols_b_along_rows() {
        let w = make_gemm(8, 8, 8).unwrap();
        let t = TileScheme::for_extents(&w, &[4, 4, 8]).unwrap();
        let sp = sharing_axes(&w, &t, (2, 2), AxisAssignment { rows: 0, cols: 1 }).unwrap();
        assert!(sp.operands[0].shareable_cols && !sp.operands[0].shareable_rows);
        assert!(sp.operands[1].shareable_rows && !sp.operands[1].shareable_cols);
        assert_eq!(sp.operands[0].forward, Some(MeshAxis::Cols));
        assert_eq!(sp.operands[1].forward, Some(MeshAxis::Rows));
        assert_eq!(sp.phases, 2);
        assert_eq!(sp.split_index, Some(2));
    }

    #[test]
    fn solo_mesh_forwards_nothing() {
        let w = make_gemm(8, 8, 8).unwrap();
        let t = TileScheme::for_extents(&w, &[4, 4, 8]).unwrap();
        let sp = sharing_axes(&w, &t, (1, 1), AxisAssignment { rows: 0, cols: 1 }).unwrap();
        assert!(sp.operands.iter().all(|o| o.forward.is_none()));
        assert_eq!(sp.phases, 1);
    }

    #[test]
    fn conv_kernel_invariant_to_spatial() {
        let w = make_conv(&ConvParams {
            c_in: 8,
            c_out: 8,
            in_w: 10,
            in_h: 10,
            k_w: 3,
            k_h: 3,
            stride: 1,
            dilation: 1,
        })
        .unwrap();
        let k = &w.operands[1].map;
        assert_eq!(k.jacobian_column(1), vec![0, 0, 0, 0]);
        assert_eq!(k.jacobian_column(2), vec![0, 0, 0, 0]);
        let t = TileScheme::for_extents(&w, &[4, 4, 4, 8, 3, 3]).unwrap();
        let sp = sharing_axes(&w, &t, (2, 2), AxisAssignment { rows: 1, cols: 2 }).unwrap();
        assert!(sp.operands[1].shareable_rows && sp.operands[1].shareable_cols);
        assert!(!sp.operands[0].shareable_rows && !sp.operands[0].shareable_cols);
        // Every kernel coordinate is clean; the longest temporal index wins.
        assert_eq!(sp.split_index, Some(3));
    }

    #[test]
    fn temporal_assignment_rejected() {
        let w = make_gemm(8, 8, 8).unwrap();
        let t = TileScheme::for_extents(&w, &[4, 4, 8]).unwrap();
        assert!(matches!(
            sharing_axes(&w, &t, (2, 2), AxisAssignment { rows: 2, cols: 1 }),
            Err(ScheduleError::InvalidAssignment(_))
        ));
    }

    #[test]
    fn default_assignment_largest_first() {
        let w = make_gemm(16, 64, 8).unwrap();
        assert_eq!(default_assignment(&w), AxisAssignment { rows: 1, cols: 0 });
    }

    #[test]
    fn phase_chunks_cover_range() {
        let w = make_gemm(8, 8, 8).unwrap();
        let t = TileScheme::for_extents(&w, &[4, 4, 8]).unwrap();
        let mut sp = sharing_axes(&w, &t, (2, 4), AxisAssignment { rows: 0, cols: 1 }).unwrap();
        assert_eq!(sp.phases, 4);
        sp.phases = 4;
        let mut covered = 0;
        for p in 0..4 {
            let (a, b) = sp.phase_chunk(7, p);
            assert_eq!(a, covered);
            covered = b;
        }
        assert_eq!(covered, 7);
    }
}
