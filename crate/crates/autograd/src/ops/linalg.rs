//! Matrix products backed by `matrixmultiply`.

use crate::graph::Var;
use crate::tensor::Tensor;

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatView<'a> {
    /// `stored` is `[r, c]` in row-major order; `trans` views it as `[c, r]`.
    fn new(data: &'a [f64], r: usize, c: usize, trans: bool) -> Self {
        if trans {
            Self { data, rows: c, cols: r, rs: 1, cs: c as isize }
        } else {
            Self { data, rows: r, cols: c, rs: c as isize, cs: 1 }
        }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out (+)= a · b` where `out` is written with strides `(rsc, csc)`.
fn gemm_into(a: MatView<'_>, b: MatView<'_>, out: &mut [f64], rsc: isize, csc: isize, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: views and output buffers are sized for the given dimensions
    // and strides; the asserts below pin that contract.
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && out.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `out (+)= op(a) · op(b)` on row-major buffers, where `a` is stored as
/// `[ar, ac]` and `b` as `[br, bc]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rm(
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let av = MatView::new(a, ar, ac, ta);
    let bv = MatView::new(b, br, bc, tb);
    let n = bv.cols;
    gemm_into(av, bv, out, n as isize, 1, accumulate);
}

/// Plain `[m, k] · [k, n]` product of row-major buffers; `ta`/`tb` mark
/// operands stored transposed.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let av = if ta { MatView::new(a, k, m, true) } else { MatView::new(a, m, k, false) };
    let bv = if tb { MatView::new(b, n, k, true) } else { MatView::new(b, k, n, false) };
    let mut out = vec![0.0; m * n];
    gemm_into(av, bv, &mut out, n as isize, 1, false);
    out
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [r, c] => (1, r, c),
        [b, r, c] => (b, r, c),
        _ => panic!("matmul expects rank 2 or 3, got {shape:?}"),
    }
}

impl<'g> Var<'g> {
    /// `op(a) · op(b)` for rank-2 operands, or batched rank-3 operands with
    /// equal batch size. `ta`/`tb` transpose the last two axes.
    pub fn matmul_ex(&self, other: &Var<'g>, ta: bool, tb: bool) -> Var<'g> {
        let rank = self.shape().len();
        assert_eq!(rank, other.shape().len(), "matmul rank mismatch");
        let (ba, ar, ac) = split_batch(self.shape());
        let (bb, br, bc) = split_batch(other.shape());
        assert_eq!(ba, bb, "matmul batch mismatch");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner mismatch: {:?} x {:?}", self.shape(), other.shape());
        let batch = ba;
        let (asz, bsz, csz) = (ar * ac, br * bc, m * n);
        let mut out = vec![0.0; batch * csz];
        for i in 0..batch {
            let av = MatView::new(&self.value.data()[i * asz..(i + 1) * asz], ar, ac, ta);
            let bv = MatView::new(&other.value.data()[i * bsz..(i + 1) * bsz], br, bc, tb);
            gemm_into(av, bv, &mut out[i * csz..(i + 1) * csz], n as isize, 1, false);
        }
        let out_shape = if rank == 2 { vec![m, n] } else { vec![batch, m, n] };
        let (a, b) = (self.value_rc(), other.value_rc());
        self.graph
            .record(&[self, other], Tensor::new(out_shape, out), move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * asz];
                    for i in 0..batch {
                        let gv = MatView::new(&gd[i * csz..(i + 1) * csz], m, n, false);
                        let bv = MatView::new(&b.data()[i * bsz..(i + 1) * bsz], br, bc, tb);
                        // d op(a) = g · op(b)^T, written back in a's storage layout.
                        let (rsc, csc) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
                        gemm_into(gv, bv.t(), &mut ga[i * asz..(i + 1) * asz], rsc, csc, false);
                    }
                    Tensor::new(a.shape().to_vec(), ga)
                });
                let gb = needs[1].then(|| {
                    let mut gbv = vec![0.0; batch * bsz];
                    for i in 0..batch {
                        let gv = MatView::new(&gd[i * csz..(i + 1) * csz], m, n, false);
                        let av = MatView::new(&a.data()[i * asz..(i + 1) * asz], ar, ac, ta);
                        let (rsc, csc) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
                        gemm_into(av.t(), gv, &mut gbv[i * bsz..(i + 1) * bsz], rsc, csc, false);
                    }
                    Tensor::new(b.shape().to_vec(), gbv)
                });
                vec![ga, gb]
            })
    }

    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        self.matmul_ex(other, false, false)
    }

    /// `self · other^T`.
    pub fn matmul_t(&self, other: &Var<'g>) -> Var<'g> {
        self.matmul_ex(other, false, true)
    }

    /// Affine map over the last axis with a `[out, in]` weight (PyTorch layout).
    pub fn linear(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Var<'g> {
        let shape = self.shape().to_vec();
        let d_in = *shape.last().expect("linear on scalar");
        assert_eq!(weight.shape().len(), 2, "linear weight must be rank 2");
        assert_eq!(weight.shape()[1], d_in, "linear: input width mismatch");
        let d_out = weight.shape()[0];
        let rows = self.value.numel() / d_in.max(1);
        let mut y = self.reshape(&[rows, d_in]).matmul_t(weight);
        if let Some(b) = bias {
            y = y.add_bias(b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        y.reshape(&out_shape)
    }
}

#[cfg(test)]
mod tests {
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn transposed_flags_agree_with_explicit_transpose() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.91).cos());
        let g = Graph::no_grad();
        let expected = naive(&a, &b);
        let at = g.constant(a.permute(&[1, 0]));
        let bt = g.constant(b.permute(&[1, 0]));
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        for (x, y, ta, tb) in [(&av, &bv, false, false), (&at, &bv, true, false), (&av, &bt, false, true), (&at, &bt, true, true)] {
            let out = x.matmul_ex(y, ta, tb);
            for (o, e) in out.value().data().iter().zip(&expected) {
                assert!((o - e).abs() < 1e-12);
            }
        }
    }
}
