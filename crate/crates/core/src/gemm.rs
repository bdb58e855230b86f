//! GEMM with a fault hook on operand reads.
//!
//! `C[i, j] = sum_k a'(i, k) * b'(k, j)`, accumulated sequentially over `k` in
//! `f32` and rounded to bf16 once per output element. `a'`/`b'` are the stored
//! operands unless the hook returns a non-zero mask for that element, in which
//! case the flipped value is used for this call only. The operand matrices
//! are borrowed immutably, so a corruption can never outlive the call.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::bf16::{bf16_encode, Bf16};
use crate::matrix::Bf16Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    Forward,
    Backward,
}

impl Pass {
    pub fn prefix(self) -> &'static str {
        match self {
            Pass::Forward => "FP",
            Pass::Backward => "BP",
        }
    }
}

/// Identity of one GEMM call site: `FP<i>` / `BP<i>` in call order within a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GemmSiteId {
    pub pass: Pass,
    pub ordinal: u16,
}

impl GemmSiteId {
    pub const fn forward(ordinal: u16) -> Self {
        GemmSiteId {
            pass: Pass::Forward,
            ordinal,
        }
    }

    pub const fn backward(ordinal: u16) -> Self {
        GemmSiteId {
            pass: Pass::Backward,
            ordinal,
        }
    }
}

impl fmt::Display for GemmSiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.pass.prefix(), self.ordinal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    A,
    B,
}

/// Source of operand corruption for GEMM calls.
///
/// Implementations must be pure in their arguments so that a step can be
/// replayed bit-exactly.
pub trait FaultHook {
    /// Cheap pre-check; when false, `mask` is never polled for `site`.
    fn watches(&self, site: GemmSiteId) -> bool;

    /// Mask to XOR into element (`row`, `col`) of the `rows x cols` operand,
    /// or 0 to leave it alone.
    fn mask(
        &self,
        site: GemmSiteId,
        operand: Operand,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    ) -> u16;
}

impl<F> FaultHook for F
where
    F: Fn(GemmSiteId, Operand, usize, usize, usize, usize) -> u16,
{
    fn watches(&self, _site: GemmSiteId) -> bool {
        true
    }

    fn mask(
        &self,
        site: GemmSiteId,
        operand: Operand,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    ) -> u16 {
        self(site, operand, row, col, rows, cols)
    }
}

/// What the hook did during one call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GemmStats {
    /// Number of operand elements read through a non-zero mask.
    pub corrupted: usize,
    /// First corrupted element: operand, flat row-major index, mask.
    pub first: Option<(Operand, usize, u16)>,
}

pub fn gemm(
    a: &Bf16Matrix,
    b: &Bf16Matrix,
    site: GemmSiteId,
    hook: Option<&dyn FaultHook>,
) -> Result<Bf16Matrix> {
    gemm_traced(a, b, site, hook).map(|(c, _)| c)
}

fn read_operand(
    m: &Bf16Matrix,
    operand: Operand,
    site: GemmSiteId,
    hook: Option<&dyn FaultHook>,
    stats: &mut GemmStats,
) -> Vec<f32> {
    let mut out: Vec<f32> = m.data().iter().map(|v| v.to_f32()).collect();
    if let Some(h) = hook {
        let (rows, cols) = m.shape();
        for r in 0..rows {
            for c in 0..cols {
                let mask = h.mask(site, operand, r, c, rows, cols);
                if mask != 0 {
                    let idx = r * cols + c;
                    out[idx] = m.data()[idx].flip_bits(mask).to_f32();
                    stats.corrupted += 1;
                    if stats.first.is_none() {
                        stats.first = Some((operand, idx, mask));
                    }
                }
            }
        }
    }
    out
}

/// [`gemm`] that also reports how many operand reads the hook corrupted.
pub fn gemm_traced(
    a: &Bf16Matrix,
    b: &Bf16Matrix,
    site: GemmSiteId,
    hook: Option<&dyn FaultHook>,
) -> Result<(Bf16Matrix, GemmStats)> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "gemm",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let hook = hook.filter(|h| h.watches(site));
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut stats = GemmStats::default();
    let a32 = read_operand(a, Operand::A, site, hook, &mut stats);
    let b32 = read_operand(b, Operand::B, site, hook, &mut stats);

    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f32; n];
    for i in 0..m {
        acc.fill(0.0);
        let a_row = &a32[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b32[kk * n..(kk + 1) * n];
            // one running sum per output column, each added to in k order
            for (c, &bv) in acc.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
        out.extend(acc.iter().map(|&x| bf16_encode(x)));
    }
    Ok((Bf16Matrix::new(m, n, out)?, stats))
}

/// Encode an f32 row-major buffer, used where kernels produce f32 results.
pub(crate) fn encode_all(values: &[f32]) -> Vec<Bf16> {
    values.iter().map(|&x| bf16_encode(x)).collect()
}

#[allow(dead_code)]
pub(crate) fn decode_all(values: &[Bf16]) -> Vec<f32> {
    values.iter().map(|v| v.to_f32()).collect()
}
