//! Raw slice kernels behind the graph operations: matrix products and
//! im2col-based convolution. Parallel splits are along independent output rows
//! or batch items, never along a reduction, so both execution modes agree bit
//! for bit.

use crate::exec;
use crate::tensor::Real;

/// Columns of `c` processed together, sized so the touched panel of `b` stays in cache.
const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Columns are processed in cache-sized panels and the reduction is unrolled
/// four terms at a time. Each output element is still summed in increasing `p`.
pub fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        for (c_full, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)).take(m) {
            let c_row = &mut c_full[j0..j1];
            let mut quads = a_row.chunks_exact(4);
            let mut p = 0;
            for q in &mut quads {
                let b0 = &b[p * n + j0..p * n + j1];
                let b1 = &b[(p + 1) * n + j0..(p + 1) * n + j1];
                let b2 = &b[(p + 2) * n + j0..(p + 2) * n + j1];
                let b3 = &b[(p + 3) * n + j0..(p + 3) * n + j1];
                let (a0, a1, a2, a3) = (q[0], q[1], q[2], q[3]);
                for ((((cv, &x0), &x1), &x2), &x3) in c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                    *cv += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
                }
                p += 4;
            }
            for &av in quads.remainder() {
                let b_row = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
                p += 1;
            }
        }
        j0 = j1;
    }
}

/// Zero out subnormal values in place. Subnormal operands slow floating-point
/// arithmetic by orders of magnitude on common hardware, and they appear in
/// attention products once softmax rows saturate.
pub fn flush_subnormals<T: Real>(v: &mut [T]) {
    let tiny = T::min_positive_value();
    for x in v.iter_mut() {
        if x.abs() < tiny {
            *x = T::zero();
        }
    }
}

const LANES: usize = 8;

/// Dot product with eight independent partial sums, combined in a fixed order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`, all row-major.
pub fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    // each row of `b` is reused against every row of `a` while it is hot
    for (j, b_row) in b.chunks_exact(k).enumerate().take(n) {
        for (i, a_row) in a.chunks_exact(k).enumerate().take(m) {
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Unroll one C×H×W image into a (C·k·k)×(Ho·Wo) patch matrix with zero padding.
pub fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let (ho, wo, k, pad) = (d.out_h(), d.out_w(), d.k, d.pad as isize);
    let mut col = vec![T::zero(); d.col_rows() * d.col_cols()];
    for ci in 0..d.c_in {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = oh as isize + kh as isize - pad;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let src_row = &plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let dst_row = &mut dst[oh * wo..(oh + 1) * wo];
                    for (ow, v) in dst_row.iter_mut().enumerate() {
                        let iw = ow as isize + kw as isize - pad;
                        if iw >= 0 && iw < d.w as isize {
                            *v = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a patch matrix back onto a C×H×W image (adjoint of [`im2col`]).
pub fn col2im<T: Real>(col: &[T], d: &ConvDims, x: &mut [T]) {
    let (ho, wo, k, pad) = (d.out_h(), d.out_w(), d.k, d.pad as isize);
    for ci in 0..d.c_in {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = oh as isize + kh as isize - pad;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for ow in 0..wo {
                        let iw = ow as isize + kw as isize - pad;
                        if iw >= 0 && iw < d.w as isize {
                            dst_row[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation: returns N×Cout×Ho×Wo.
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims) -> Vec<T> {
    let in_per = d.c_in * d.h * d.w;
    let out_per = d.c_out * d.col_cols();
    let mut out = vec![T::zero(); d.batch * out_per];
    exec::for_each_chunk(&mut out, out_per, |n, y| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let p = d.col_cols();
        for (co, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        if d.is_pointwise() {
            gemm_acc(weight, xn, y, d.c_out, d.c_in, p);
        } else {
            let col = im2col(xn, d);
            gemm_acc(weight, &col, y, d.c_out, d.col_rows(), p);
        }
        flush_subnormals(y);
    });
    out
}

/// Gradients of a cross-correlation with respect to input, weight and bias.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    d: &ConvDims,
    need_dx: bool,
) -> ConvGrads<T> {
    let in_per = d.c_in * d.h * d.w;
    let p = d.col_cols();
    let kk = d.col_rows();
    let out_per = d.c_out * p;
    let w_t = transpose(weight, d.c_out, kk);

    let per_item: Vec<(Vec<T>, Option<Vec<T>>)> = exec::map_range(d.batch, |n| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let gn = &dout[n * out_per..(n + 1) * out_per];
        let col = if d.is_pointwise() { xn.to_vec() } else { im2col(xn, d) };
        let mut dw = vec![T::zero(); d.c_out * kk];
        gemm_nt_acc(gn, &col, &mut dw, d.c_out, p, kk);
        let dx = need_dx.then(|| {
            let mut dcol = vec![T::zero(); kk * p];
            gemm_acc(&w_t, gn, &mut dcol, kk, d.c_out, p);
            flush_subnormals(&mut dcol);
            if d.is_pointwise() {
                dcol
            } else {
                let mut dx = vec![T::zero(); in_per];
                col2im(&dcol, d, &mut dx);
                dx
            }
        });
        (dw, dx)
    });

    let mut dw = vec![T::zero(); d.c_out * kk];
    let mut db = vec![T::zero(); d.c_out];
    let mut dx = need_dx.then(|| Vec::with_capacity(d.batch * in_per));
    for (n, (dwn, dxn)) in per_item.into_iter().enumerate() {
        dw.iter_mut().zip(&dwn).for_each(|(a, &b)| *a += b);
        let gn = &dout[n * out_per..(n + 1) * out_per];
        for (co, row) in gn.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
        if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
            dx.extend_from_slice(&dxn);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Batched product: for each of `batch` items, `c = op(a) · op(b)` where `op`
/// optionally transposes. Shapes are given after the transpose is applied.
#[allow(clippy::too_many_arguments)]
pub fn bmm<T: Real>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    exec::for_each_chunk(&mut out, m * n, |i, c| {
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        let at;
        let ai = if trans_a {
            at = transpose(ai, k, m);
            &at[..]
        } else {
            ai
        };
        if trans_b {
            gemm_nt_acc(ai, bi, c, m, k, n);
        } else {
            gemm_acc(ai, bi, c, m, k, n);
        }
        flush_subnormals(c);
    });
    out
}
