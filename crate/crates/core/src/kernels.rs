//! Elementwise and row-wise kernels. All arithmetic is `f32`; results that
//! feed the model are rounded back to bf16. Nothing here traps on NaN or Inf.

use alloc::vec::Vec;

use crate::bf16::{bf16_encode, Bf16};
use crate::matrix::Bf16Matrix;

pub const RMSNORM_EPS: f32 = 1e-5;

/// Target id that is excluded from the loss.
pub const IGNORE_TARGET: u32 = u32::MAX;

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

#[inline]
pub(crate) fn silu_f32(x: f32) -> f32 {
    x * sigmoid(x)
}

/// d silu / dx.
#[inline]
pub(crate) fn silu_grad_f32(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Softmax of one row in place.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in row.iter() {
        if x > max || x.is_nan() {
            max = x;
        }
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = libm::expf(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(m: &Bf16Matrix) -> Bf16Matrix {
    let mut values = m.to_f32_vec();
    if m.cols() > 0 {
        for row in values.chunks_mut(m.cols()) {
            softmax_in_place(row);
        }
    }
    Bf16Matrix::from_f32_unchecked(m.rows(), m.cols(), &values)
}

/// Inverse root-mean-square of a row, `1 / sqrt(mean(x^2) + eps)`.
#[inline]
pub(crate) fn inv_rms(row: &[f32]) -> f32 {
    let mut ss = 0.0f32;
    for &x in row {
        ss += x * x;
    }
    1.0 / libm::sqrtf(ss / row.len() as f32 + RMSNORM_EPS)
}

pub fn rmsnorm(v: &[Bf16], gain: &[Bf16]) -> Vec<Bf16> {
    assert_eq!(v.len(), gain.len(), "rmsnorm: gain length");
    let x: Vec<f32> = v.iter().map(|b| b.to_f32()).collect();
    let r = inv_rms(&x);
    x.iter()
        .zip(gain)
        .map(|(&xi, g)| bf16_encode(xi * r * g.to_f32()))
        .collect()
}

/// Row-wise RMSNorm. Also returns the per-row inverse RMS for the backward pass.
pub fn rmsnorm_rows(x: &Bf16Matrix, gain: &[Bf16]) -> (Bf16Matrix, Vec<f32>) {
    assert_eq!(x.cols(), gain.len(), "rmsnorm_rows: gain length");
    let g: Vec<f32> = gain.iter().map(|b| b.to_f32()).collect();
    let cols = x.cols();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.rows());
    let mut row = alloc::vec![0.0f32; cols];
    for r in 0..x.rows() {
        for (dst, src) in row.iter_mut().zip(x.row(r)) {
            *dst = src.to_f32();
        }
        let ir = inv_rms(&row);
        inv.push(ir);
        for (xi, gi) in row.iter().zip(&g) {
            out.push(bf16_encode(xi * ir * gi));
        }
    }
    (
        Bf16Matrix::new(x.rows(), cols, out).expect("shape preserved"),
        inv,
    )
}

pub fn silu(v: &[Bf16]) -> Vec<Bf16> {
    v.iter().map(|x| bf16_encode(silu_f32(x.to_f32()))).collect()
}

/// Mean negative log-likelihood over rows whose target is not
/// [`IGNORE_TARGET`]. Zero when every row is ignored.
pub fn cross_entropy(logits: &Bf16Matrix, targets: &[u32]) -> f32 {
    cross_entropy_impl(logits, targets, None)
}

/// Loss together with d loss / d logits.
pub fn cross_entropy_with_grad(logits: &Bf16Matrix, targets: &[u32]) -> (f32, Bf16Matrix) {
    let mut grad = Vec::with_capacity(logits.len());
    let loss = cross_entropy_impl(logits, targets, Some(&mut grad));
    (
        loss,
        Bf16Matrix::new(logits.rows(), logits.cols(), grad).expect("shape preserved"),
    )
}

fn cross_entropy_impl(logits: &Bf16Matrix, targets: &[u32], mut grad: Option<&mut Vec<Bf16>>) -> f32 {
    assert_eq!(logits.rows(), targets.len(), "cross_entropy: one target per row");
    let cols = logits.cols();
    let counted = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
    let scale = if counted == 0 { 0.0 } else { 1.0 / counted as f32 };
    let mut total = 0.0f32;
    let mut probs = alloc::vec![0.0f32; cols];
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t == IGNORE_TARGET {
            if let Some(g) = grad.as_deref_mut() {
                g.extend(core::iter::repeat_n(Bf16::ZERO, cols));
            }
            continue;
        }
        for (p, l) in probs.iter_mut().zip(row) {
            *p = l.to_f32();
        }
        let mut max = f32::NEG_INFINITY;
        for &x in probs.iter() {
            if x > max || x.is_nan() {
                max = x;
            }
        }
        let mut sum = 0.0f32;
        for &x in probs.iter() {
            sum += libm::expf(x - max);
        }
        let lse = max + libm::logf(sum);
        total += lse - probs[t as usize];
        if let Some(g) = grad.as_deref_mut() {
            for (j, &x) in probs.iter().enumerate() {
                let mut p = libm::expf(x - lse);
                if j == t as usize {
                    p -= 1.0;
                }
                g.push(bf16_encode(p * scale));
            }
        }
    }
    total * scale
}
