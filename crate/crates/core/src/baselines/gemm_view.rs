//! A workload seen as a batch of matrix products.
//!
//! Parallel indices both operands depend on form the batch `G`, those only
//! operand 1 (the weights) depends on form `N`, the rest form `M`. Temporal
//! indices form `K` in their row-major order, so a contiguous `K` range of a
//! convolution is a contiguous block of input channels.

use crate::schedule::footprint;
use crate::tensor::{InTensor, OutTensor, Tensor};
use crate::workload::{advance, Workload};

#[derive(Clone, Debug)]
pub(crate) struct GemmView {
    pub g_dims: Vec<usize>,
    pub m_dims: Vec<usize>,
    pub n_dims: Vec<usize>,
    pub k_dims: Vec<usize>,
    pub gs: usize,
    pub ms: usize,
    pub ns: usize,
    pub ks: usize,
}

fn size(w: &Workload, dims: &[usize]) -> usize {
    dims.iter().map(|&d| w.extents()[d]).product()
}

impl GemmView {
    pub fn new(w: &Workload) -> Self {
        let p = w.parallel_count;
        let (mut g_dims, mut m_dims, mut n_dims) = (vec![], vec![], vec![]);
        for d in 0..p {
            let a = !w.operands[0].map.invariant_to(d);
            let b = !w.operands[1].map.invariant_to(d);
            match (a, b) {
                (true, true) => g_dims.push(d),
                (false, true) => n_dims.push(d),
                _ => m_dims.push(d),
            }
        }
        let k_dims: Vec<usize> = (p..w.rank()).collect();
        GemmView {
            gs: size(w, &g_dims),
            ms: size(w, &m_dims),
            ns: size(w, &n_dims),
            ks: size(w, &k_dims),
            g_dims,
            m_dims,
            n_dims,
            k_dims,
        }
    }

    /// Per flattened index over `dims`: offsets into operand 0, operand 1
    /// and the output.
    fn offsets(w: &Workload, dims: &[usize]) -> Vec<[i64; 3]> {
        let la = w.operands[0].linear();
        let lb = w.operands[1].linear();
        let ostrides = crate::tensor::row_major_strides(&w.output_shape);
        let ext: Vec<usize> = dims.iter().map(|&d| w.extents()[d]).collect();
        let mut idx = vec![0usize; dims.len()];
        let mut out = Vec::with_capacity(size(w, dims));
        loop {
            let mut o = [0i64; 3];
            for (q, &d) in dims.iter().enumerate() {
                let x = idx[q] as i64;
                o[0] += la.coef[d] * x;
                o[1] += lb.coef[d] * x;
                if d < w.parallel_count {
                    o[2] += ostrides[d] as i64 * x;
                }
            }
            out.push(o);
            if !advance(&mut idx, &ext) {
                break;
            }
        }
        out
    }

    /// Bounding-box words of operand 0 read by rows `m0..m1` of one batch
    /// entry over the whole `K` range.
    pub fn act_footprint(&self, w: &Workload, m0: usize, m1: usize) -> u64 {
        let mut ext: Vec<usize> = w.extents().to_vec();
        for &d in self.g_dims.iter().chain(&self.n_dims) {
            ext[d] = 1;
        }
        let m_ext: Vec<usize> = self.m_dims.iter().map(|&d| w.extents()[d]).collect();
        let lo = decode(m0, &m_ext);
        let hi = decode(m1 - 1, &m_ext);
        let mut differ = false;
        for (q, &d) in self.m_dims.iter().enumerate() {
            ext[d] = if differ {
                m_ext[q]
            } else if lo[q] != hi[q] {
                differ = true;
                hi[q] - lo[q] + 1
            } else {
                1
            };
        }
        footprint(w, 0, &ext)
    }

    /// Words of operand 1 used by one batch entry.
    pub fn weight_words(&self, w: &Workload) -> u64 {
        let mut ext: Vec<usize> = w.extents().to_vec();
        for &d in self.g_dims.iter().chain(&self.m_dims) {
            ext[d] = 1;
        }
        footprint(w, 1, &ext)
    }
}

fn decode(mut n: usize, ext: &[usize]) -> Vec<usize> {
    let mut v = vec![0; ext.len()];
    for q in (0..ext.len()).rev() {
        v[q] = n % ext[q];
        n /= ext[q];
    }
    v
}

/// Gathered operands of one batch entry: `a` is `ms × ks`, `b` is `ns × ks`,
/// both contiguous along `K`.
pub(crate) struct Gathered {
    pub a: Vec<i16>,
    pub b: Vec<i16>,
}

/// Functional evaluator over a [`GemmView`].
pub(crate) struct GemmExec<'a> {
    view: &'a GemmView,
    inputs: &'a [InTensor],
    g_off: Vec<[i64; 3]>,
    m_off: Vec<[i64; 3]>,
    n_off: Vec<[i64; 3]>,
    k_off: Vec<[i64; 3]>,
    base: [i64; 2],
    pub out: OutTensor,
}

impl<'a> GemmExec<'a> {
    pub fn new(w: &Workload, view: &'a GemmView, inputs: &'a [InTensor]) -> Self {
        GemmExec {
            view,
            inputs,
            g_off: GemmView::offsets(w, &view.g_dims),
            m_off: GemmView::offsets(w, &view.m_dims),
            n_off: GemmView::offsets(w, &view.n_dims),
            k_off: GemmView::offsets(w, &view.k_dims),
            base: [w.operands[0].linear().base, w.operands[1].linear().base],
            out: Tensor::zeros(&w.output_shape),
        }
    }

    pub fn gather(&self, g: usize) -> Gathered {
        let v = self.view;
        let (a_src, b_src) = (self.inputs[0].data(), self.inputs[1].data());
        let go = self.g_off[g];
        let mut a = Vec::with_capacity(v.ms * v.ks);
        for mo in &self.m_off {
            let row = self.base[0] + go[0] + mo[0];
            a.extend(self.k_off.iter().map(|ko| a_src[(row + ko[0]) as usize]));
        }
        let mut b = Vec::with_capacity(v.ns * v.ks);
        for no in &self.n_off {
            let row = self.base[1] + go[1] + no[1];
            b.extend(self.k_off.iter().map(|ko| b_src[(row + ko[1]) as usize]));
        }
        Gathered { a, b }
    }

    /// `acc[(m - m0)·nlen + (n - n0)] += Σ_{k0 ≤ k < k1} a[m,k]·b[n,k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &self,
        g: &Gathered,
        (m0, m1): (usize, usize),
        (n0, n1): (usize, usize),
        (k0, k1): (usize, usize),
        acc: &mut [i32],
    ) {
        let ks = self.view.ks;
        let nlen = n1 - n0;
        for m in m0..m1 {
            let ar = &g.a[m * ks + k0..m * ks + k1];
            for n in n0..n1 {
                let br = &g.b[n * ks + k0..n * ks + k1];
                let s = ar
                    .iter()
                    .zip(br)
                    .fold(0i32, |s, (&x, &y)| s.wrapping_add(x as i32 * y as i32));
                let slot = &mut acc[(m - m0) * nlen + (n - n0)];
                *slot = slot.wrapping_add(s);
            }
        }
    }

    /// Copies a finished `acc` block into the output tensor.
    pub fn write_back(
        &mut self,
        g: usize,
        (m0, m1): (usize, usize),
        (n0, n1): (usize, usize),
        acc: &[i32],
    ) {
        let go = self.g_off[g][2];
        let nlen = n1 - n0;
        let od = self.out.data_mut();
        for m in m0..m1 {
            let mo = go + self.m_off[m][2];
            for n in n0..n1 {
                od[(mo + self.n_off[n][2]) as usize] = acc[(m - m0) * nlen + (n - n0)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_inputs;
    use crate::workload::{eval_reference, make_depthwise, make_gemm, ConvParams};

    fn full(w: &Workload, seed: u64) -> OutTensor {
        let v = GemmView::new(w);
        let inputs = random_inputs(w, seed);
        let mut ex = GemmExec::new(w, &v, &inputs);
        for g in 0..v.gs {
            let ga = ex.gather(g);
            let mut acc = vec![0i32; v.ms * v.ns];
            ex.accumulate(&ga, (0, v.ms), (0, v.ns), (0, v.ks), &mut acc);
            ex.write_back(g, (0, v.ms), (0, v.ns), &acc);
        }
        assert_eq!(ex.out, eval_reference(w, &inputs).unwrap());
        ex.out
    }

    #[test]
    fn gemm_split() {
        let w = make_gemm(5, 7, 3).unwrap();
        let v = GemmView::new(&w);
        assert_eq!((v.gs, v.ms, v.ns, v.ks), (1, 5, 7, 3));
        full(&w, 1);
    }

    #[test]
    fn conv_and_depthwise_split() {
        let w = crate::workload::make_conv(&ConvParams {
            c_in: 3,
            c_out: 4,
            in_w: 7,
            in_h: 6,
            k_w: 3,
            k_h: 2,
            stride: 2,
            dilation: 1,
        })
        .unwrap();
        let v = GemmView::new(&w);
        assert_eq!((v.gs, v.ns, v.ks), (1, 4, 3 * 3 * 2));
        full(&w, 2);
        let w = make_depthwise(4, 6, 6, 3, 3, 1, 1).unwrap();
        let v = GemmView::new(&w);
        assert_eq!((v.gs, v.ns, v.ks), (4, 1, 9));
        full(&w, 3);
    }

    #[test]
    fn footprints() {
        let w = make_gemm(8, 4, 6).unwrap();
        let v = GemmView::new(&w);
        assert_eq!(v.act_footprint(&w, 2, 5), 3 * 6);
        assert_eq!(v.weight_words(&w), 24);
    }
}
