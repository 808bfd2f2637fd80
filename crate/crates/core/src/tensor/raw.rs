//! Raw dense f64 kernels behind the tape ops.
//!
//! All matrices are row-major slices. The matmul kernels parallelize over
//! output rows once the MAC count crosses `PAR_MIN`; each output element is
//! still accumulated by a single sequential loop, so results are bitwise
//! identical with and without the `parallel` feature.

use crate::par;

/// Minimum multiply-accumulate count before a matmul goes data-parallel.
/// Training-step matmuls sit below this; evaluation-scale ones sit above.
const PAR_MIN: usize = 1 << 21;

/// out[m,n] = a[m,k] * b[k,n]. `out` must be zeroed.
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN && m > 1 {
        par::for_each_chunk_mut(out, n, |i, orow| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T, i.e. out[i][j] = dot(a_i, b_j).
pub fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = dot(arow, brow);
        }
    };
    if m * k * n >= PAR_MIN && m > 1 {
        par::for_each_chunk_mut(out, n, |i, orow| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[k,n] += a[k,m... transposed] : out[p][j] += sum_i a[i][p] * g[i][j].
///
/// This is the `a^T * g` pattern used by matmul backward; `out` is
/// accumulated into, not zeroed.
pub fn mm_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b^T where b is [k,n]: out[i][p] += dot(g_i, b_p).
pub fn mm_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += dot(grow, brow);
        }
    }
}

/// out[m,n] += a[m,k] * b[k,n], accumulating variant of `mm_nn`.
pub fn mm_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Row-wise softmax with max subtraction, out may alias a fresh buffer.
pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        z += e;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-wise log-softmax: x - logsumexp(x).
pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &v in x {
        z += (v - m).exp();
    }
    let lse = m + z.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

pub const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}
