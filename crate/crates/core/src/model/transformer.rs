use alloc::vec;
use alloc::vec::Vec;

use super::params::{final_norm_group, head_group, layer_group, slot, GradientSet, ParameterSet, POS, TOK};
use super::sites::{bwd, bwd_site, fwd, fwd_head, fwd_site};
use super::ModelConfig;
use crate::bf16::{bf16_encode, Bf16};
use crate::data::Batch;
use crate::gemm::{encode_all, gemm_traced, FaultHook, GemmSiteId, Operand};
use crate::kernels::{cross_entropy, cross_entropy_with_grad, silu_f32, silu_grad_f32, softmax_in_place, IGNORE_TARGET};
use crate::matrix::Bf16Matrix;
use crate::{Error, Result};

/// One GEMM call whose operand reads were corrupted by the hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptedCall {
    pub site: GemmSiteId,
    pub operand: Operand,
    /// Flat row-major index of the first corrupted element.
    pub element: usize,
    pub mask: u16,
    /// Number of operand elements read through a non-zero mask.
    pub elements: usize,
}

/// Routes every model GEMM through an optional hook and keeps a log of the
/// calls it corrupted.
pub struct GemmTap<'a> {
    hook: Option<&'a dyn FaultHook>,
    pub calls: u64,
    pub corrupted: Vec<CorruptedCall>,
}

impl<'a> GemmTap<'a> {
    pub fn new(hook: Option<&'a dyn FaultHook>) -> Self {
        GemmTap {
            hook,
            calls: 0,
            corrupted: Vec::new(),
        }
    }

    pub fn clean() -> GemmTap<'static> {
        GemmTap::new(None)
    }

    fn gemm(&mut self, a: &Bf16Matrix, b: &Bf16Matrix, site: GemmSiteId) -> Bf16Matrix {
        self.calls += 1;
        let (c, stats) = gemm_traced(a, b, site, self.hook).expect("model shapes are consistent by construction");
        if let Some((operand, element, mask)) = stats.first {
            self.corrupted.push(CorruptedCall {
                site,
                operand,
                element,
                mask,
                elements: stats.corrupted,
            });
        }
        c
    }
}

struct LayerCache {
    x_in: Bf16Matrix,
    h1: Bf16Matrix,
    inv1: Vec<f32>,
    q: Bf16Matrix,
    k: Bf16Matrix,
    v: Bf16Matrix,
    /// Causal attention probabilities, one `T x T` matrix per (batch, head).
    probs: Vec<Bf16Matrix>,
    attn: Bf16Matrix,
    x_mid: Bf16Matrix,
    h2: Bf16Matrix,
    inv2: Vec<f32>,
    gate: Bf16Matrix,
    up: Bf16Matrix,
    act: Bf16Matrix,
}

/// Output of [`forward`] plus the activations [`backward`] needs.
pub struct ForwardRecord {
    pub loss: f32,
    /// Largest scaled pre-softmax attention score over all layers, heads and
    /// causal positions. NaN if any score was NaN.
    pub max_attn_logit: f32,
    layers: Vec<LayerCache>,
    x_final: Bf16Matrix,
    hf: Bf16Matrix,
    inv_f: Vec<f32>,
    dlogits: Bf16Matrix,
}

#[inline]
fn nan_max(a: f32, b: f32) -> f32 {
    if a.is_nan() || b.is_nan() {
        f32::NAN
    } else if b > a {
        b
    } else {
        a
    }
}

fn norm_rows(x: &Bf16Matrix, gain: &Bf16Matrix) -> (Bf16Matrix, Vec<f32>) {
    crate::kernels::rmsnorm_rows(x, gain.data())
}

fn add(a: &Bf16Matrix, b: &Bf16Matrix) -> Bf16Matrix {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| bf16_encode(x.to_f32() + y.to_f32()))
        .collect();
    Bf16Matrix::new(a.rows(), a.cols(), data).expect("same shape")
}

fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    if batch.seq_len != cfg.seq_len {
        return Err(Error::InvalidConfig("batch seq_len differs from model seq_len"));
    }
    let n = batch.batch_size * batch.seq_len;
    if batch.inputs.len() != n || batch.targets.len() != n {
        return Err(Error::DataLength {
            expected: n,
            got: batch.inputs.len().min(batch.targets.len()),
        });
    }
    for &t in &batch.inputs {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
    }
    for &t in &batch.targets {
        if t != IGNORE_TARGET && t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
    }
    Ok(())
}

/// Run the model on `batch` and compute the mean cross-entropy loss.
///
/// Forward GEMMs are visited in the fixed order given by
/// [`super::enumerate_gemm_sites`]. A corrupted GEMM output is what later
/// layers and the backward pass see.
pub fn forward(cfg: &ModelConfig, params: &ParameterSet, batch: &Batch, tap: &mut GemmTap<'_>) -> Result<ForwardRecord> {
    forward_impl(cfg, params, batch, tap, true)
}

fn forward_impl(
    cfg: &ModelConfig,
    params: &ParameterSet,
    batch: &Batch,
    tap: &mut GemmTap<'_>,
    want_grad: bool,
) -> Result<ForwardRecord> {
    check_batch(cfg, batch)?;
    let (bs, t) = (batch.batch_size, batch.seq_len);
    let n = bs * t;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = 1.0 / libm::sqrtf(dh as f32);

    let tok = params.value(TOK);
    let pos = params.value(POS);
    let mut x = Vec::with_capacity(n * d);
    for (i, &token) in batch.inputs.iter().enumerate() {
        let te = tok.row(token as usize);
        let pe = pos.row(i % t);
        x.extend(te.iter().zip(pe).map(|(a, b)| bf16_encode(a.to_f32() + b.to_f32())));
    }
    let mut x = Bf16Matrix::new(n, d, x)?;

    let mut max_logit = f32::NEG_INFINITY;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut row = vec![0.0f32; t];
    for l in 0..cfg.n_layers {
        let w = |s| params.value(layer_group(l, s));
        let (h1, inv1) = norm_rows(&x, w(slot::ATTN_NORM));
        let q = tap.gemm(&h1, w(slot::WQ), fwd_site(l, fwd::Q));
        let k = tap.gemm(&h1, w(slot::WK), fwd_site(l, fwd::K));
        let v = tap.gemm(&h1, w(slot::WV), fwd_site(l, fwd::V));

        let mut attn = Bf16Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(bs * nh);
        for b in 0..bs {
            for h in 0..nh {
                let qb = q.block(b * t, h * dh, t, dh);
                let kt = k.block(b * t, h * dh, t, dh).transpose();
                let vb = v.block(b * t, h * dh, t, dh);
                let s = tap.gemm(&qb, &kt, fwd_site(l, fwd::SCORES));
                let mut p = Vec::with_capacity(t * t);
                for i in 0..t {
                    let causal = &mut row[..=i];
                    for (j, r) in causal.iter_mut().enumerate() {
                        *r = s.get(i, j).to_f32() * scale;
                        max_logit = nan_max(max_logit, *r);
                    }
                    softmax_in_place(causal);
                    p.extend(causal.iter().map(|&x| bf16_encode(x)));
                    p.extend(core::iter::repeat_n(Bf16::ZERO, t - i - 1));
                }
                let p = Bf16Matrix::new(t, t, p)?;
                let o = tap.gemm(&p, &vb, fwd_site(l, fwd::VALUES));
                attn.set_block(b * t, h * dh, &o);
                probs.push(p);
            }
        }
        let proj = tap.gemm(&attn, w(slot::WO), fwd_site(l, fwd::O));
        let x_mid = add(&x, &proj);

        let (h2, inv2) = norm_rows(&x_mid, w(slot::FFN_NORM));
        let gate = tap.gemm(&h2, w(slot::W_GATE), fwd_site(l, fwd::GATE));
        let up = tap.gemm(&h2, w(slot::W_UP), fwd_site(l, fwd::UP));
        let act: Vec<Bf16> = gate
            .data()
            .iter()
            .zip(up.data())
            .map(|(g, u)| bf16_encode(silu_f32(g.to_f32()) * u.to_f32()))
            .collect();
        let act = Bf16Matrix::new(n, cfg.d_ff(), act)?;
        let down = tap.gemm(&act, w(slot::W_DOWN), fwd_site(l, fwd::DOWN));
        let x_out = add(&x_mid, &down);

        layers.push(LayerCache {
            x_in: core::mem::replace(&mut x, x_out),
            h1,
            inv1,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            h2,
            inv2,
            gate,
            up,
            act,
        });
    }

    let (hf, inv_f) = norm_rows(&x, params.value(final_norm_group(cfg)));
    let logits = tap.gemm(&hf, params.value(head_group(cfg)), fwd_head(cfg));
    let (loss, dlogits) = if want_grad {
        cross_entropy_with_grad(&logits, &batch.targets)
    } else {
        (cross_entropy(&logits, &batch.targets), Bf16Matrix::zeros(0, 0))
    };

    Ok(ForwardRecord {
        loss,
        max_attn_logit: max_logit,
        layers,
        x_final: x,
        hf,
        inv_f,
        dlogits,
    })
}

/// Mean loss over `batches` with no hook installed.
pub fn evaluate_loss(cfg: &ModelConfig, params: &ParameterSet, batches: &[Batch]) -> Result<f32> {
    if batches.is_empty() {
        return Ok(f32::NAN);
    }
    let mut total = 0.0f32;
    for b in batches {
        total += forward_impl(cfg, params, b, &mut GemmTap::clean(), false)?.loss;
    }
    Ok(total / batches.len() as f32)
}

/// RMSNorm backward for every row. Returns d x (f32) and d gain.
fn rmsnorm_backward(x: &Bf16Matrix, gain: &Bf16Matrix, inv: &[f32], dy: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let cols = x.cols();
    let g: Vec<f32> = gain.data().iter().map(|v| v.to_f32()).collect();
    let mut dx = vec![0.0f32; x.len()];
    let mut dg = vec![0.0f32; cols];
    let mut xr = vec![0.0f32; cols];
    for r in 0..x.rows() {
        for (dst, src) in xr.iter_mut().zip(x.row(r)) {
            *dst = src.to_f32();
        }
        let ir = inv[r];
        let dyr = &dy[r * cols..(r + 1) * cols];
        let mut s = 0.0f32;
        for j in 0..cols {
            dg[j] += dyr[j] * xr[j] * ir;
            s += dyr[j] * g[j] * xr[j];
        }
        let coef = ir * ir * ir * s / cols as f32;
        for j in 0..cols {
            dx[r * cols + j] = ir * g[j] * dyr[j] - xr[j] * coef;
        }
    }
    (dx, dg)
}

fn to_f32(m: &Bf16Matrix) -> Vec<f32> {
    m.to_f32_vec()
}

fn accumulate(dst: &mut [f32], src: &Bf16Matrix) {
    for (d, s) in dst.iter_mut().zip(src.data()) {
        *d += s.to_f32();
    }
}

fn row_matrix(values: &[f32]) -> Bf16Matrix {
    Bf16Matrix::new(1, values.len(), encode_all(values)).expect("row shape")
}

/// Gradients of the mean loss with respect to every parameter group.
///
/// Backward GEMMs run in the fixed order given by
/// [`super::enumerate_gemm_sites`]. The residual-stream gradient is carried
/// in f32 and rounded to bf16 where it enters a GEMM.
pub fn backward(
    cfg: &ModelConfig,
    params: &ParameterSet,
    record: &ForwardRecord,
    batch: &Batch,
    tap: &mut GemmTap<'_>,
) -> Result<GradientSet> {
    check_batch(cfg, batch)?;
    if record.layers.len() != cfg.n_layers || record.dlogits.rows() != batch.tokens() {
        return Err(Error::InvalidConfig("forward record does not match config and batch"));
    }
    let (bs, t) = (batch.batch_size, batch.seq_len);
    let n = bs * t;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = 1.0 / libm::sqrtf(dh as f32);
    let mut grads = params.zeros_like();

    let head = head_group(cfg);
    grads.groups[head] = tap.gemm(
        &record.hf.transpose(),
        &record.dlogits,
        GemmSiteId::backward(bwd::HEAD_DW),
    );
    let dhf = tap.gemm(
        &record.dlogits,
        &params.value(head).transpose(),
        GemmSiteId::backward(bwd::HEAD_DX),
    );
    let fnorm = final_norm_group(cfg);
    let (mut dres, dg) = rmsnorm_backward(&record.x_final, params.value(fnorm), &record.inv_f, &to_f32(&dhf));
    grads.groups[fnorm] = row_matrix(&dg);

    let mut ds_row = vec![0.0f32; t];
    for l in (0..cfg.n_layers).rev() {
        let c = &record.layers[l];
        let w = |s| params.value(layer_group(l, s));
        let site = |role| bwd_site(cfg, l, role);

        // feed-forward block
        let d_out = Bf16Matrix::new(n, d, encode_all(&dres))?;
        grads.groups[layer_group(l, slot::W_DOWN)] = tap.gemm(&c.act.transpose(), &d_out, site(bwd::DOWN_DW));
        let dact = tap.gemm(&d_out, &w(slot::W_DOWN).transpose(), site(bwd::DOWN_DX));
        let mut du = Vec::with_capacity(dact.len());
        let mut dgate = Vec::with_capacity(dact.len());
        for ((a, g), u) in dact.data().iter().zip(c.gate.data()).zip(c.up.data()) {
            let (a, g, u) = (a.to_f32(), g.to_f32(), u.to_f32());
            du.push(bf16_encode(a * silu_f32(g)));
            dgate.push(bf16_encode(a * u * silu_grad_f32(g)));
        }
        let du = Bf16Matrix::new(n, cfg.d_ff(), du)?;
        let dgate = Bf16Matrix::new(n, cfg.d_ff(), dgate)?;
        let h2t = c.h2.transpose();
        grads.groups[layer_group(l, slot::W_UP)] = tap.gemm(&h2t, &du, site(bwd::UP_DW));
        let mut dh2 = to_f32(&tap.gemm(&du, &w(slot::W_UP).transpose(), site(bwd::UP_DX)));
        grads.groups[layer_group(l, slot::W_GATE)] = tap.gemm(&h2t, &dgate, site(bwd::GATE_DW));
        accumulate(&mut dh2, &tap.gemm(&dgate, &w(slot::W_GATE).transpose(), site(bwd::GATE_DX)));
        let (dx2, dg2) = rmsnorm_backward(&c.x_mid, w(slot::FFN_NORM), &c.inv2, &dh2);
        for (r, x) in dres.iter_mut().zip(&dx2) {
            *r += x;
        }
        grads.groups[layer_group(l, slot::FFN_NORM)] = row_matrix(&dg2);

        // attention block
        let d_o = Bf16Matrix::new(n, d, encode_all(&dres))?;
        grads.groups[layer_group(l, slot::WO)] = tap.gemm(&c.attn.transpose(), &d_o, site(bwd::O_DW));
        let dattn = tap.gemm(&d_o, &w(slot::WO).transpose(), site(bwd::O_DX));
        let mut dq = Bf16Matrix::zeros(n, d);
        let mut dk = Bf16Matrix::zeros(n, d);
        let mut dv = Bf16Matrix::zeros(n, d);
        for b in 0..bs {
            for h in 0..nh {
                let p = &c.probs[b * nh + h];
                let d_ob = dattn.block(b * t, h * dh, t, dh);
                let vt = c.v.block(b * t, h * dh, t, dh).transpose();
                let dp = tap.gemm(&d_ob, &vt, site(bwd::VALUES_DP));
                let dvb = tap.gemm(&p.transpose(), &d_ob, site(bwd::VALUES_DV));
                let mut ds = Vec::with_capacity(t * t);
                for i in 0..t {
                    let mut dot = 0.0f32;
                    for j in 0..=i {
                        dot += p.get(i, j).to_f32() * dp.get(i, j).to_f32();
                    }
                    for (j, slot) in ds_row.iter_mut().enumerate() {
                        *slot = if j <= i {
                            p.get(i, j).to_f32() * (dp.get(i, j).to_f32() - dot) * scale
                        } else {
                            0.0
                        };
                    }
                    ds.extend(ds_row.iter().map(|&x| bf16_encode(x)));
                }
                let ds = Bf16Matrix::new(t, t, ds)?;
                let kb = c.k.block(b * t, h * dh, t, dh);
                let qb = c.q.block(b * t, h * dh, t, dh);
                let dqb = tap.gemm(&ds, &kb, site(bwd::SCORES_DQ));
                let dkb = tap.gemm(&ds.transpose(), &qb, site(bwd::SCORES_DK));
                dq.set_block(b * t, h * dh, &dqb);
                dk.set_block(b * t, h * dh, &dkb);
                dv.set_block(b * t, h * dh, &dvb);
            }
        }
        let h1t = c.h1.transpose();
        grads.groups[layer_group(l, slot::WQ)] = tap.gemm(&h1t, &dq, site(bwd::Q_DW));
        let mut dh1 = to_f32(&tap.gemm(&dq, &w(slot::WQ).transpose(), site(bwd::Q_DX)));
        grads.groups[layer_group(l, slot::WK)] = tap.gemm(&h1t, &dk, site(bwd::K_DW));
        accumulate(&mut dh1, &tap.gemm(&dk, &w(slot::WK).transpose(), site(bwd::K_DX)));
        grads.groups[layer_group(l, slot::WV)] = tap.gemm(&h1t, &dv, site(bwd::V_DW));
        accumulate(&mut dh1, &tap.gemm(&dv, &w(slot::WV).transpose(), site(bwd::V_DX)));
        let (dx1, dg1) = rmsnorm_backward(&c.x_in, w(slot::ATTN_NORM), &c.inv1, &dh1);
        for (r, x) in dres.iter_mut().zip(&dx1) {
            *r += x;
        }
        grads.groups[layer_group(l, slot::ATTN_NORM)] = row_matrix(&dg1);
    }

    // embeddings: scatter-add in row order
    let mut dtok = vec![0.0f32; cfg.vocab_size * d];
    let mut dpos = vec![0.0f32; cfg.seq_len * d];
    for (i, &token) in batch.inputs.iter().enumerate() {
        let src = &dres[i * d..(i + 1) * d];
        let tok_row = &mut dtok[token as usize * d..(token as usize + 1) * d];
        for (a, b) in tok_row.iter_mut().zip(src) {
            *a += b;
        }
        let p = i % t;
        for (a, b) in dpos[p * d..(p + 1) * d].iter_mut().zip(src) {
            *a += b;
        }
    }
    grads.groups[TOK] = Bf16Matrix::new(cfg.vocab_size, d, encode_all(&dtok))?;
    grads.groups[POS] = Bf16Matrix::new(cfg.seq_len, d, encode_all(&dpos))?;
    Ok(grads)
}
