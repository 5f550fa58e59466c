//! Workloads as an NDRange plus affine operand index maps.
//!
//! Every workload here is a binary tensor contraction: the output element at a
//! parallel point is the sum, over the temporal indices, of the product of two
//! mapped operand words. GEMM, convolution (including dilated and depthwise)
//! and spatial correlation all fit this form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{row_major_strides, InTensor, OutTensor, Tensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("extent of index {index} must be >= 1")]
    ZeroExtent { index: usize },
    #[error("parameter `{0}` must be >= 1")]
    ZeroParam(&'static str),
    #[error("NDRange point count overflows")]
    Overflow,
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("index map of operand `{operand}` leaves the tensor on dim {dim}: range [{lo}, {hi}] vs extent {extent}")]
    OutOfBounds {
        operand: String,
        dim: usize,
        lo: i64,
        hi: i64,
        extent: usize,
    },
    #[error("index map shape mismatch for operand `{0}`")]
    MapShape(String),
    #[error("operand {index} shape {got:?} does not match declared {want:?}")]
    InputShape {
        index: usize,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("expected 2 input tensors, got {0}")]
    InputCount(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NdRange {
    extents: Vec<usize>,
}

impl NdRange {
    pub fn new(extents: Vec<usize>) -> Result<Self, WorkloadError> {
        if let Some(index) = extents.iter().position(|&e| e == 0) {
            return Err(WorkloadError::ZeroExtent { index });
        }
        let mut n: u64 = 1;
        for &e in &extents {
            n = n.checked_mul(e as u64).ok_or(WorkloadError::Overflow)?;
        }
        if n > usize::MAX as u64 {
            return Err(WorkloadError::Overflow);
        }
        Ok(NdRange { extents })
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn points(&self) -> u64 {
        self.extents.iter().map(|&e| e as u64).product()
    }
}

/// `coord = matrix · point + offset`, with `matrix[r][d]` the coefficient of
/// NDRange index `d` in tensor dimension `r`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    pub matrix: Vec<Vec<i64>>,
    pub offset: Vec<i64>,
}

impl IndexMap {
    pub fn new(matrix: Vec<Vec<i64>>, offset: Vec<i64>) -> Self {
        IndexMap { matrix, offset }
    }

    /// Map selecting NDRange indices `dims` as the tensor coordinates.
    pub fn select(ndim: usize, dims: &[usize]) -> Self {
        let matrix = dims
            .iter()
            .map(|&d| {
                let mut row = vec![0; ndim];
                row[d] = 1;
                row
            })
            .collect();
        IndexMap {
            matrix,
            offset: vec![0; dims.len()],
        }
    }

    pub fn rank(&self) -> usize {
        self.matrix.len()
    }

    pub fn ndim(&self) -> usize {
        self.matrix.first().map_or(0, |r| r.len())
    }

    pub fn coeff(&self, r: usize, d: usize) -> i64 {
        self.matrix[r][d]
    }

    pub fn jacobian_column(&self, d: usize) -> Vec<i64> {
        self.matrix.iter().map(|row| row[d]).collect()
    }

    /// True when the mapped coordinate does not move with index `d`.
    pub fn invariant_to(&self, d: usize) -> bool {
        self.matrix.iter().all(|row| row[d] == 0)
    }

    pub fn apply(&self, point: &[usize]) -> Vec<i64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, off)| {
                off + row
                    .iter()
                    .zip(point)
                    .map(|(c, &p)| c * p as i64)
                    .sum::<i64>()
            })
            .collect()
    }

    /// Inclusive coordinate range of dimension `r` over an index box.
    pub fn range_over(&self, r: usize, lo: &[usize], hi_incl: &[usize]) -> (i64, i64) {
        let mut a = self.offset[r];
        let mut b = self.offset[r];
        for (d, &c) in self.matrix[r].iter().enumerate() {
            let (x0, x1) = (lo[d] as i64, hi_incl[d] as i64);
            if c >= 0 {
                a += c * x0;
                b += c * x1;
            } else {
                a += c * x1;
                b += c * x0;
            }
        }
        (a, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operand {
    pub name: String,
    pub shape: Vec<usize>,
    pub map: IndexMap,
    pub word_bytes: usize,
}

impl Operand {
    pub fn elements(&self) -> u64 {
        self.shape.iter().map(|&e| e as u64).product()
    }

    /// Flattened form: row-major offset = `base + Σ coef[d]·point[d]`.
    pub fn linear(&self) -> LinearMap {
        let strides = row_major_strides(&self.shape);
        let nd = self.map.ndim();
        let mut coef = vec![0i64; nd];
        let mut base = 0i64;
        for (r, row) in self.map.matrix.iter().enumerate() {
            let s = strides[r] as i64;
            base += self.map.offset[r] * s;
            for d in 0..nd {
                coef[d] += row[d] * s;
            }
        }
        LinearMap { coef, base }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearMap {
    pub coef: Vec<i64>,
    pub base: i64,
}

impl LinearMap {
    pub fn at(&self, point: &[usize]) -> i64 {
        self.base
            + self
                .coef
                .iter()
                .zip(point)
                .map(|(c, &p)| c * p as i64)
                .sum::<i64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub k_w: usize,
    pub k_h: usize,
    pub stride: usize,
    pub dilation: usize,
    pub out_w: usize,
    pub out_h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Gemm {
        m: usize,
        n: usize,
        k: usize,
    },
    Conv(ConvGeom),
    /// One input channel per output channel; `c_in == c_out`.
    Depthwise(ConvGeom),
    Correlation {
        c_in: usize,
        out_w: usize,
        out_h: usize,
        disp_w: usize,
        disp_h: usize,
    },
}

impl Geometry {
    pub fn tag(&self) -> &'static str {
        match self {
            Geometry::Gemm { .. } => "gemm",
            Geometry::Conv(_) => "conv",
            Geometry::Depthwise(_) => "depthwise",
            Geometry::Correlation { .. } => "correlation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub ndrange: NdRange,
    pub parallel_count: usize,
    pub operands: [Operand; 2],
    pub output_shape: Vec<usize>,
    pub psum_bytes: usize,
    pub geometry: Geometry,
}

impl Workload {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let ext = self.ndrange.extents();
        if self.parallel_count > ext.len() {
            return Err(WorkloadError::Geometry(
                "parallel_count exceeds rank".into(),
            ));
        }
        if self.output_shape != ext[..self.parallel_count] {
            return Err(WorkloadError::Geometry(
                "output shape must equal the parallel extents".into(),
            ));
        }
        let lo = vec![0usize; ext.len()];
        let hi: Vec<usize> = ext.iter().map(|&e| e - 1).collect();
        for op in &self.operands {
            if op.map.rank() != op.shape.len()
                || op.map.offset.len() != op.shape.len()
                || op.map.matrix.iter().any(|r| r.len() != ext.len())
            {
                return Err(WorkloadError::MapShape(op.name.clone()));
            }
            for r in 0..op.shape.len() {
                let (a, b) = op.map.range_over(r, &lo, &hi);
                if a < 0 || b >= op.shape[r] as i64 {
                    return Err(WorkloadError::OutOfBounds {
                        operand: op.name.clone(),
                        dim: r,
                        lo: a,
                        hi: b,
                        extent: op.shape[r],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn macs(&self) -> u64 {
        self.ndrange.points()
    }

    pub fn rank(&self) -> usize {
        self.ndrange.rank()
    }

    pub fn extents(&self) -> &[usize] {
        self.ndrange.extents()
    }

    pub fn is_parallel(&self, d: usize) -> bool {
        d < self.parallel_count
    }

    pub fn output_elements(&self) -> u64 {
        self.output_shape.iter().map(|&e| e as u64).product()
    }

    /// Compulsory bytes: both operand tensors plus the output once.
    pub fn unique_bytes(&self) -> u64 {
        self.operands
            .iter()
            .map(|o| o.elements() * o.word_bytes as u64)
            .sum::<u64>()
            + self.output_elements() * self.psum_bytes as u64
    }

    pub fn check_inputs(&self, inputs: &[InTensor]) -> Result<(), WorkloadError> {
        if inputs.len() != 2 {
            return Err(WorkloadError::InputCount(inputs.len()));
        }
        for (i, (t, op)) in inputs.iter().zip(&self.operands).enumerate() {
            if t.shape() != op.shape.as_slice() {
                return Err(WorkloadError::InputShape {
                    index: i,
                    got: t.shape().to_vec(),
                    want: op.shape.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn conv_geom(&self) -> Option<&ConvGeom> {
        match &self.geometry {
            Geometry::Conv(g) | Geometry::Depthwise(g) => Some(g),
            _ => None,
        }
    }

    /// Overrides the operand and accumulator widths.
    pub fn with_word_bytes(mut self, word_bytes: usize, psum_bytes: usize) -> Self {
        for op in &mut self.operands {
            op.word_bytes = word_bytes;
        }
        self.psum_bytes = psum_bytes;
        self
    }
}

fn nonzero(v: usize, name: &'static str) -> Result<(), WorkloadError> {
    if v == 0 {
        Err(WorkloadError::ZeroParam(name))
    } else {
        Ok(())
    }
}

/// `C(i,j) = Σ_k A(i,k) B(k,j)` over NDRange(M,N,K).
pub fn make_gemm(m: usize, n: usize, k: usize) -> Result<Workload, WorkloadError> {
    nonzero(m, "M")?;
    nonzero(n, "N")?;
    nonzero(k, "K")?;
    let ndrange = NdRange::new(vec![m, n, k])?;
    let a = Operand {
        name: "A".into(),
        shape: vec![m, k],
        map: IndexMap::select(3, &[0, 2]),
        word_bytes: 2,
    };
    let b = Operand {
        name: "B".into(),
        shape: vec![k, n],
        map: IndexMap::select(3, &[2, 1]),
        word_bytes: 2,
    };
    let w = Workload {
        name: format!("GEMM {m}x{n}x{k}"),
        ndrange,
        parallel_count: 2,
        operands: [a, b],
        output_shape: vec![m, n],
        psum_bytes: 4,
        geometry: Geometry::Gemm { m, n, k },
    };
    w.validate()?;
    Ok(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub c_in: usize,
    pub c_out: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub k_w: usize,
    pub k_h: usize,
    pub stride: usize,
    pub dilation: usize,
}

pub fn conv_out_extent(input: usize, k: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    if input < span {
        None
    } else {
        Some((input - span) / stride + 1)
    }
}

fn conv_geom(p: &ConvParams) -> Result<ConvGeom, WorkloadError> {
    for (v, n) in [
        (p.c_in, "C_i"),
        (p.c_out, "C_o"),
        (p.in_w, "i_w"),
        (p.in_h, "i_h"),
        (p.k_w, "k_w"),
        (p.k_h, "k_h"),
        (p.stride, "stride"),
        (p.dilation, "dilation"),
    ] {
        nonzero(v, n)?;
    }
    let out_w = conv_out_extent(p.in_w, p.k_w, p.stride, p.dilation)
        .ok_or_else(|| WorkloadError::Geometry(format!("o_w < 1 for input width {}", p.in_w)))?;
    let out_h = conv_out_extent(p.in_h, p.k_h, p.stride, p.dilation)
        .ok_or_else(|| WorkloadError::Geometry(format!("o_h < 1 for input height {}", p.in_h)))?;
    Ok(ConvGeom {
        c_in: p.c_in,
        c_out: p.c_out,
        in_w: p.in_w,
        in_h: p.in_h,
        k_w: p.k_w,
        k_h: p.k_h,
        stride: p.stride,
        dilation: p.dilation,
        out_w,
        out_h,
    })
}

/// `O(i,j,k) = Σ_{l,m,n} I(l, s·j+d·m, s·k+d·n) · K(i,l,m,n)` over
/// NDRange(C_o, o_w, o_h, C_i, k_w, k_h).
pub fn make_conv(p: &ConvParams) -> Result<Workload, WorkloadError> {
    let g = conv_geom(p)?;
    let (s, d) = (g.stride as i64, g.dilation as i64);
    let ndrange = NdRange::new(vec![g.c_out, g.out_w, g.out_h, g.c_in, g.k_w, g.k_h])?;
    let input = Operand {
        name: "I".into(),
        shape: vec![g.c_in, g.in_w, g.in_h],
        map: IndexMap::new(
            vec![
                vec![0, 0, 0, 1, 0, 0],
                vec![0, s, 0, 0, d, 0],
                vec![0, 0, s, 0, 0, d],
            ],
            vec![0; 3],
        ),
        word_bytes: 2,
    };
    let kernel = Operand {
        name: "K".into(),
        shape: vec![g.c_out, g.c_in, g.k_w, g.k_h],
        map: IndexMap::select(6, &[0, 3, 4, 5]),
        word_bytes: 2,
    };
    let w = Workload {
        name: format!(
            "CONV {}x{} s{} d{} {}->{} @{}x{}",
            g.k_w, g.k_h, g.stride, g.dilation, g.c_in, g.c_out, g.in_w, g.in_h
        ),
        ndrange,
        parallel_count: 3,
        operands: [input, kernel],
        output_shape: vec![g.c_out, g.out_w, g.out_h],
        psum_bytes: 4,
        geometry: Geometry::Conv(g),
    };
    w.validate()?;
    Ok(w)
}

/// Depthwise conv: the conv form with C_i = 1 and input channel `i + l`.
pub fn make_depthwise(
    channels: usize,
    in_w: usize,
    in_h: usize,
    k_w: usize,
    k_h: usize,
    stride: usize,
    dilation: usize,
) -> Result<Workload, WorkloadError> {
    let g = conv_geom(&ConvParams {
        c_in: channels,
        c_out: channels,
        in_w,
        in_h,
        k_w,
        k_h,
        stride,
        dilation,
    })?;
    let (s, d) = (g.stride as i64, g.dilation as i64);
    let ndrange = NdRange::new(vec![channels, g.out_w, g.out_h, 1, k_w, k_h])?;
    let input = Operand {
        name: "I".into(),
        shape: vec![channels, in_w, in_h],
        map: IndexMap::new(
            vec![
                vec![1, 0, 0, 1, 0, 0],
                vec![0, s, 0, 0, d, 0],
                vec![0, 0, s, 0, 0, d],
            ],
            vec![0; 3],
        ),
        word_bytes: 2,
    };
    let kernel = Operand {
        name: "K".into(),
        shape: vec![channels, 1, k_w, k_h],
        map: IndexMap::select(6, &[0, 3, 4, 5]),
        word_bytes: 2,
    };
    let w = Workload {
        name: format!(
            "DWCONV {}x{} s{} d{} {} @{}x{}",
            k_w, k_h, stride, dilation, channels, in_w, in_h
        ),
        ndrange,
        parallel_count: 3,
        operands: [input, kernel],
        output_shape: vec![channels, g.out_w, g.out_h],
        psum_bytes: 4,
        geometry: Geometry::Depthwise(g),
    };
    w.validate()?;
    Ok(w)
}

/// `O(i,j,k,l) = Σ_m I1(m,k,l) · I2(m,i+k,j+l)` over
/// NDRange(s_w, s_h, o_w, o_h, C_i). `I2` is the zero-padded reference map of
/// shape `(C_i, o_w+s_w-1, o_h+s_h-1)`.
pub fn make_correlation(
    c_in: usize,
    out_w: usize,
    out_h: usize,
    disp_w: usize,
    disp_h: usize,
) -> Result<Workload, WorkloadError> {
    nonzero(c_in, "C_i")?;
    nonzero(out_w, "o_w")?;
    nonzero(out_h, "o_h")?;
    nonzero(disp_w, "s_w")?;
    nonzero(disp_h, "s_h")?;
    let ndrange = NdRange::new(vec![disp_w, disp_h, out_w, out_h, c_in])?;
    let i1 = Operand {
        name: "I1".into(),
        shape: vec![c_in, out_w, out_h],
        map: IndexMap::select(5, &[4, 2, 3]),
        word_bytes: 2,
    };
    let i2 = Operand {
        name: "I2".into(),
        shape: vec![c_in, out_w + disp_w - 1, out_h + disp_h - 1],
        map: IndexMap::new(
            vec![
                vec![0, 0, 0, 0, 1],
                vec![1, 0, 1, 0, 0],
                vec![0, 1, 0, 1, 0],
            ],
            vec![0; 3],
        ),
        word_bytes: 2,
    };
    let w = Workload {
        name: format!("CORR {c_in} @{out_w}x{out_h} disp {disp_w}x{disp_h}"),
        ndrange,
        parallel_count: 4,
        operands: [i1, i2],
        output_shape: vec![disp_w, disp_h, out_w, out_h],
        psum_bytes: 4,
        geometry: Geometry::Correlation {
            c_in,
            out_w,
            out_h,
            disp_w,
            disp_h,
        },
    };
    w.validate()?;
    Ok(w)
}

/// Functional oracle: direct evaluation of the sum of products with exact
/// (wrapping) 32-bit accumulation.
pub fn eval_reference(w: &Workload, inputs: &[InTensor]) -> Result<OutTensor, WorkloadError> {
    w.check_inputs(inputs)?;
    w.validate()?;
    let ext = w.extents();
    let p = w.parallel_count;
    let la = w.operands[0].linear();
    let lb = w.operands[1].linear();

    // Offsets of every temporal point, relative to the parallel base.
    let mut toff: Vec<(i64, i64)> = Vec::new();
    let t_ext = &ext[p..];
    let mut idx = vec![0usize; t_ext.len()];
    loop {
        let mut oa = 0i64;
        let mut ob = 0i64;
        for (q, &x) in idx.iter().enumerate() {
            oa += la.coef[p + q] * x as i64;
            ob += lb.coef[p + q] * x as i64;
        }
        toff.push((oa, ob));
        if !advance(&mut idx, t_ext) {
            break;
        }
    }

    let a = inputs[0].data();
    let b = inputs[1].data();
    let mut out = Tensor::<i32>::zeros(&w.output_shape);
    let od = out.data_mut();
    let p_ext = &ext[..p];
    let mut pidx = vec![0usize; p];
    let mut o = 0usize;
    loop {
        let mut ba = la.base;
        let mut bb = lb.base;
        for (d, &x) in pidx.iter().enumerate() {
            ba += la.coef[d] * x as i64;
            bb += lb.coef[d] * x as i64;
        }
        let mut acc = 0i32;
        for &(oa, ob) in &toff {
            let x = a[(ba + oa) as usize] as i32;
            let y = b[(bb + ob) as usize] as i32;
            acc = acc.wrapping_add(x * y);
        }
        od[o] = acc;
        o += 1;
        if !advance(&mut pidx, p_ext) {
            break;
        }
    }
    Ok(out)
}

/// Row-major odometer step; false once the index wraps past the end.
pub fn advance(idx: &mut [usize], ext: &[usize]) -> bool {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        if idx[d] < ext[d] {
            return true;
        }
        idx[d] = 0;
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_trivial_maps() {
        let w = make_gemm(1, 1, 1).unwrap();
        assert_eq!(w.extents(), &[1, 1, 1]);
        assert_eq!(w.operands[0].map.apply(&[0, 0, 0]), vec![0, 0]);
        assert_eq!(w.operands[1].map.apply(&[0, 0, 0]), vec![0, 0]);
    }

    #[test]
    fn gemm_jacobian_of_a() {
        let w = make_gemm(3, 4, 5).unwrap();
        assert_eq!(w.operands[0].map.matrix, vec![vec![1, 0, 0], vec![0, 0, 1]]);
        assert!(w.operands[0].map.invariant_to(1));
        assert!(w.operands[1].map.invariant_to(0));
    }

    #[test]
    fn zero_params_rejected() {
        assert!(make_gemm(0, 1, 1).is_err());
        assert!(make_correlation(1, 1, 0, 1, 1).is_err());
    }

    #[test]
    fn overflow_rejected() {
        let big = usize::MAX / 2;
        assert_eq!(
            make_gemm(big, big, big).unwrap_err(),
            WorkloadError::Overflow
        );
    }

    #[test]
    fn conv_out_extent_dilated() {
        // Window positions j with j + 2*2 < 7: j in {0, 1, 2}.
        let positions = (0..7usize).filter(|j| j + 2 * 2 < 7).count();
        assert_eq!(conv_out_extent(7, 3, 1, 2), Some(positions));
        assert_eq!(conv_out_extent(2, 3, 1, 1), None);
    }

    #[test]
    fn conv_1x1_map_reduces() {
        let w = make_conv(&ConvParams {
            c_in: 4,
            c_out: 2,
            in_w: 3,
            in_h: 3,
            k_w: 1,
            k_h: 1,
            stride: 1,
            dilation: 1,
        })
        .unwrap();
        let m = &w.operands[0].map;
        for p in [[1usize, 2, 1, 3, 0, 0], [0, 0, 2, 1, 0, 0]] {
            assert_eq!(m.apply(&p), vec![p[3] as i64, p[1] as i64, p[2] as i64]);
        }
    }

    #[test]
    fn gemm_small_values() {
        let w = make_gemm(2, 2, 2).unwrap();
        let a = Tensor::from_vec(&[2, 2], vec![1i16, 2, 3, 4]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5i16, 6, 7, 8]).unwrap();
        let c = eval_reference(&w, &[a, b]).unwrap();
        assert_eq!(c.data(), &[19, 22, 43, 50]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = make_gemm(2, 3, 4).unwrap();
        let a = Tensor::<i16>::zeros(&[2, 4]);
        let b = Tensor::<i16>::zeros(&[3, 4]);
        assert!(matches!(
            eval_reference(&w, &[a, b]),
            Err(WorkloadError::InputShape { index: 1, .. })
        ));
    }
}
