//! Dense and convolution kernels with their reverse-mode counterparts.
//!
//! Layouts are row-major: images are `[channels, side, side]`, batches of
//! vectors are `[batch, features]`, conv weights are `[cout, cin, k, k]` and
//! dense weights are `[out, in]`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the network.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `C = A B (+ C)`, raw strides as in `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Matrix operand: row-major storage, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) enum Op {
    N,
    T,
}

/// `c[m x n] (+)= op(a)[m x k] * op(b)[k x n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index the strided access touches.
    unsafe {
        T::raw_gemm(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub in_side: usize,
    pub out_side: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, in_side: usize) -> Option<Self> {
        if in_side < k || stride == 0 {
            return None;
        }
        Some(Self { cin, cout, k, stride, in_side, out_side: (in_side - k) / stride + 1 })
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.in_side * self.in_side
    }

    pub fn out_plane(&self) -> usize {
        self.out_side * self.out_side
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_plane()
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one image into `[cin*k*k, out_side^2]` columns.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.cin {
        let plane = &x[ci * g.in_side * g.in_side..(ci + 1) * g.in_side * g.in_side];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_side {
                    let src = (oy * g.stride + ky) * g.in_side + kx;
                    let out_row = &mut dst[oy * g.out_side..(oy + 1) * g.out_side];
                    if g.stride == 1 {
                        out_row.copy_from_slice(&plane[src..src + g.out_side]);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            *v = plane[src + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.in_side * g.in_side..(ci + 1) * g.in_side * g.in_side];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_side {
                    let base = (oy * g.stride + ky) * g.in_side + kx;
                    for ox in 0..g.out_side {
                        plane[base + ox * g.stride] = plane[base + ox * g.stride] + src[oy * g.out_side + ox];
                    }
                }
            }
        }
    }
}

/// Convolution forward for a batch: `out[b] = W * im2col(x[b]) + bias`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], g: &ConvGeom, batch: usize, out: &mut [T], cols: &mut Vec<T>) {
    cols.resize(g.patch() * g.out_plane(), T::zero());
    let p = g.out_plane();
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        for (co, chunk) in ob.chunks_exact_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        im2col(xb, g, cols);
        gemm(g.cout, g.patch(), p, w, Op::N, cols, Op::N, ob, true);
    }
}

/// Convolution backward; accumulates into `dw`/`db` and, when given,
/// overwrites `dx` with the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    w: &[T],
    g: &ConvGeom,
    batch: usize,
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
    cols: &mut Vec<T>,
    dcols: &mut Vec<T>,
) {
    let p = g.out_plane();
    cols.resize(g.patch() * p, T::zero());
    if dx.is_some() {
        dcols.resize(g.patch() * p, T::zero());
    }
    for b in 0..batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let gb = &dout[b * g.out_len()..(b + 1) * g.out_len()];
        for (co, chunk) in gb.chunks_exact(p).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
        im2col(xb, g, cols);
        gemm(g.cout, p, g.patch(), gb, Op::N, cols, Op::T, dw, true);
        if let Some(dx) = dx.as_deref_mut() {
            gemm(g.patch(), g.cout, p, w, Op::T, gb, Op::N, dcols, false);
            let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
            dxb.fill(T::zero());
            col2im_add(dcols, g, dxb);
        }
    }
}

/// ReLU followed by 2x2 max pooling (stride 2, floor). Records the flat
/// in-plane index of each window's maximum.
pub(crate) fn relu_maxpool<T: Scalar>(a: &[T], planes: usize, side: usize, out: &mut [T], arg: &mut [u32]) {
    let os = side / 2;
    for pl in 0..planes {
        let src = &a[pl * side * side..(pl + 1) * side * side];
        for oy in 0..os {
            for ox in 0..os {
                let mut best_i = (2 * oy) * side + 2 * ox;
                let mut best = src[best_i].max(T::zero());
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * side + 2 * ox + dx;
                    let v = src[i].max(T::zero());
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                let o = pl * os * os + oy * os + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
}

/// Adjoint of [`relu_maxpool`]; overwrites `da`.
pub(crate) fn relu_maxpool_backward<T: Scalar>(dout: &[T], a: &[T], arg: &[u32], planes: usize, side: usize, da: &mut [T]) {
    let os = side / 2;
    da.fill(T::zero());
    for pl in 0..planes {
        let base = pl * side * side;
        for o in 0..os * os {
            let oi = pl * os * os + o;
            let i = base + arg[oi] as usize;
            if a[i] > T::zero() {
                da[i] = da[i] + dout[oi];
            }
        }
    }
}

/// `y[b] = W x[b] + bias` for a batch.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], batch: usize, n_in: usize, n_out: usize, y: &mut [T]) {
    for row in y[..batch * n_out].chunks_exact_mut(n_out) {
        row.copy_from_slice(bias);
    }
    gemm(batch, n_in, n_out, x, Op::N, w, Op::T, y, true);
}

/// Accumulates `dw`, `db`; overwrites `dx` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    w: &[T],
    batch: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    for row in dy[..batch * n_out].chunks_exact(n_out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d = *d + g;
        }
    }
    gemm(n_out, batch, n_in, dy, Op::T, x, Op::N, dw, true);
    if let Some(dx) = dx {
        gemm(batch, n_out, n_in, dy, Op::N, w, Op::N, dx, false);
    }
}

pub(crate) fn relu_inplace<T: Scalar>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries whose pre-activation was not positive.
pub(crate) fn relu_mask<T: Scalar>(pre: &[T], grad: &mut [T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if !(p > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for co in 0..g.cout {
            for oy in 0..g.out_side {
                for ox in 0..g.out_side {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let xi = ci * g.in_side * g.in_side + (oy * g.stride + ky) * g.in_side + ox * g.stride + kx;
                                let wi = ((co * g.cin + ci) * g.k + ky) * g.k + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[co * g.out_plane() + oy * g.out_side + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for stride in [1, 2] {
            let g = ConvGeom::new(2, 3, 3, stride, 9).unwrap();
            let x = ramp(2 * g.in_len(), 1.0);
            let w = ramp(g.cout * g.patch(), 0.7);
            let b = vec![0.1, -0.2, 0.3];
            let mut out = vec![0.0; 2 * g.out_len()];
            conv_forward(&x, &w, &b, &g, 2, &mut out, &mut Vec::new());
            for s in 0..2 {
                let expect = naive_conv(&x[s * g.in_len()..(s + 1) * g.in_len()], &w, &b, &g);
                for (a, e) in out[s * g.out_len()..(s + 1) * g.out_len()].iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 1, 3, 2, 8).unwrap();
        let x = ramp(g.in_len(), 1.0);
        let c = ramp(g.patch() * g.out_plane(), 2.0);
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&c, &g, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_window_max_after_relu() {
        let a = vec![-1.0, 2.0, 0.5, -3.0, 4.0, -1.0, 0.0, 1.0, -2.0f64, -1.0, -0.5, -4.0, -1.0, -1.0, -1.0, -1.0];
        let mut out = vec![0.0; 4];
        let mut arg = vec![0u32; 4];
        relu_maxpool(&a, 1, 4, &mut out, &mut arg);
        assert_eq!(out, vec![4.0, 1.0, 0.0, 0.0]);
        let mut da = vec![0.0; 16];
        relu_maxpool_backward(&[1.0, 1.0, 1.0, 1.0], &a, &arg, 1, 4, &mut da);
        assert_eq!(da.iter().sum::<f64>(), 2.0);
        assert_eq!(da[4], 1.0);
    }

    #[test]
    fn softmax_and_argmax() {
        let p = softmax(&[1.0f64, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        let big = softmax(&[1000.0f64, 0.0, -1000.0]);
        assert!(big.iter().all(|v| v.is_finite()));
    }
}
