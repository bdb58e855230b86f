//! f64 re-implementation of the model's loss, used as a finite-difference
//! reference. Mirrors the layout of `ParameterSet::init`.

use sdc_forge_core::model::{ModelConfig, ParameterSet};

type M = Vec<f64>;

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> M {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..m {
                c[i * m + j] += x * b[p * m + j];
            }
        }
    }
    c
}

fn rmsnorm(x: &[f64], g: &[f64], d: usize) -> M {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + 1e-5).sqrt();
        out.extend(row.iter().zip(g).map(|(v, w)| v * r * w));
    }
    out
}

pub fn decode(params: &ParameterSet) -> Vec<M> {
    params
        .groups()
        .iter()
        .map(|g| g.value.data().iter().map(|v| v.to_f32() as f64).collect())
        .collect()
}

/// Mean next-token cross-entropy of `inputs -> targets`.
pub fn loss(cfg: &ModelConfig, p: &[M], inputs: &[u32], targets: &[u32], batch: usize) -> f64 {
    let (t, d, nh) = (cfg.seq_len, cfg.d_model, cfg.n_heads);
    let (dh, dff, v) = (cfg.d_head(), cfg.d_ff(), cfg.vocab_size);
    let n = batch * t;
    let mut x = vec![0.0; n * d];
    for (i, &tok) in inputs.iter().enumerate() {
        for c in 0..d {
            x[i * d + c] = p[0][tok as usize * d + c] + p[1][(i % t) * d + c];
        }
    }
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let w = |s: usize| &p[2 + 9 * l + s];
        let h = rmsnorm(&x, w(0), d);
        let q = matmul(&h, w(1), n, d, d);
        let k = matmul(&h, w(2), n, d, d);
        let vv = matmul(&h, w(3), n, d, d);
        let mut attn = vec![0.0; n * d];
        for b in 0..batch {
            for hd in 0..nh {
                for i in 0..t {
                    let qi = (b * t + i) * d + hd * dh;
                    let s: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kj = (b * t + j) * d + hd * dh;
                            (0..dh).map(|c| q[qi + c] * k[kj + c]).sum::<f64>() * scale
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|z| (z - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, ej) in e.iter().enumerate() {
                        let vj = (b * t + j) * d + hd * dh;
                        for c in 0..dh {
                            attn[qi + c] += ej / z * vv[vj + c];
                        }
                    }
                }
            }
        }
        let o = matmul(&attn, w(4), n, d, d);
        for (a, b) in x.iter_mut().zip(&o) {
            *a += b;
        }
        let h2 = rmsnorm(&x, w(5), d);
        let gate = matmul(&h2, w(6), n, d, dff);
        let up = matmul(&h2, w(7), n, d, dff);
        let act: M = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
        let down = matmul(&act, w(8), n, dff, d);
        for (a, b) in x.iter_mut().zip(&down) {
            *a += b;
        }
    }
    let base = 2 + 9 * cfg.n_layers;
    let hf = rmsnorm(&x, &p[base], d);
    let logits = matmul(&hf, &p[base + 1], n, d, v);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &tg) in targets.iter().enumerate() {
        if tg == u32::MAX {
            continue;
        }
        let row = &logits[i * v..(i + 1) * v];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        total += lse - row[tg as usize];
        count += 1;
    }
    total / count.max(1) as f64
}
