//! Plain slice kernels shared by the tape ops and the tape-free scoring paths.
//!
//! All products accumulate over the inner index in ascending order starting
//! from zero, so they agree bit-for-bit with a naive triple loop.

/// `out[r×c] += a[r×k] · b[k×c]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×c] += a[r×k] · b[c×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), c * k);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * c..(i + 1) * c];
        let mut j = 0;
        // Four independent accumulators; each still sums in ascending order.
        while j + 4 <= c {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for p in 0..k {
                let x = a_row[p];
                s0 += x * b0[p];
                s1 += x * b1[p];
                s2 += x * b2[p];
                s3 += x * b3[p];
            }
            out_row[j] += s0;
            out_row[j + 1] += s1;
            out_row[j + 2] += s2;
            out_row[j + 3] += s3;
            j += 4;
        }
        for jj in j..c {
            out_row[jj] += dot(a_row, &b[jj * k..(jj + 1) * k]);
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · b[r×c]`
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), r * c);
    debug_assert_eq!(out.len(), k * c);
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * c..(i + 1) * c];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * c..(p + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one slice in place. Entries with `keep[i] == false`
/// get exactly zero weight; a slice with nothing kept becomes all zeros.
pub fn softmax_in_place(xs: &mut [f64], keep: Option<&[bool]>) {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if kept(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (i, x) in xs.iter_mut().enumerate() {
        if kept(i) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_COEF: f64 = 0.044715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = sqrt_2_over_pi() * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let c = sqrt_2_over_pi();
    let inner = c * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = c * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
