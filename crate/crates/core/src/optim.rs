//! AdamW with decoupled weight decay, global-norm clipping and a
//! warmup + cosine learning-rate schedule.
//!
//! Moments are f32. Parameters are decoded, updated in f32 and re-encoded to
//! bf16. Non-finite gradients are not filtered: they flow into the moments.

use alloc::vec::Vec;

use crate::bf16::bf16_encode;
use crate::matrix::Bf16Matrix;
use crate::model::{GradientSet, ParameterSet};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_max: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_max: 1e-3,
            warmup_steps: 100,
            total_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::InvalidConfig("lr_max must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0 and weight_decay >= 0"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("clip threshold must be > 0"));
            }
        }
        if self.total_steps < self.warmup_steps {
            return Err(Error::InvalidConfig("total_steps must be >= warmup_steps"));
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `lr_max` over the warmup, then cosine decay to 0
/// at `total_steps`. Zero past the end.
pub fn lr_schedule(cfg: &AdamWConfig, step: u64) -> f32 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f32 / cfg.warmup_steps as f32;
    }
    if step >= cfg.total_steps {
        return if cfg.total_steps == cfg.warmup_steps { cfg.lr_max } else { 0.0 };
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    (cfg.lr_max as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))) as f32
}

/// L2 norm of all gradient entries, as a plain sequential f32 sum of squares
/// in group order then row-major. Squares above `f32::MAX` overflow to Inf.
pub fn global_grad_norm(grads: &GradientSet) -> f32 {
    let mut ss = 0.0f32;
    for g in grads.entries() {
        let x = g.to_f32();
        ss += x * x;
    }
    libm::sqrtf(ss)
}

/// Scale every entry by `tau / norm_pre` when `norm_pre > tau`. An infinite
/// norm gives a scale of exactly 0 (finite entries become 0, non-finite
/// entries become NaN); a NaN norm poisons every entry.
pub fn clip_gradients(grads: &GradientSet, norm_pre: f32, tau: f32) -> GradientSet {
    if norm_pre <= tau {
        return grads.clone();
    }
    let scale = tau / norm_pre;
    GradientSet {
        groups: grads
            .groups
            .iter()
            .map(|g| {
                let data = g.data().iter().map(|v| bf16_encode(v.to_f32() * scale)).collect();
                Bf16Matrix::new(g.rows(), g.cols(), data).expect("shape preserved")
            })
            .collect(),
    }
}

/// First and second moments per group, plus the count of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = || params.groups().iter().map(|g| alloc::vec![0.0f32; g.value.len()]).collect();
        OptimizerState { m: zeros(), v: zeros(), t: 0 }
    }

    /// Bitwise equality, so NaN moments compare equal to themselves.
    pub fn bits_eq(&self, other: &OptimizerState) -> bool {
        let same = |a: &[Vec<f32>], b: &[Vec<f32>]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        self.t == other.t && same(&self.m, &other.m) && same(&self.v, &other.v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    /// RMS of the adaptive update `lr * m_hat / (sqrt(v_hat) + eps)` per group.
    pub group_rms: Vec<f32>,
    /// Largest entry of `group_rms`; NaN if any entry is NaN.
    pub r_t: f32,
    pub grad_norm_pre: f32,
    pub grad_norm_post: f32,
    pub lr: f32,
}

/// Largest value, NaN-propagating and independent of order.
pub fn max_rms(group_rms: &[f32]) -> f32 {
    let mut r = 0.0f32;
    for &x in group_rms {
        if x.is_nan() {
            return f32::NAN;
        }
        if x > r {
            r = x;
        }
    }
    r
}

/// One AdamW update of `params` in place with already-clipped `grads`.
/// Returns the per-group RMS of the adaptive update and `R_t`.
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f32,
) -> Result<(Vec<f32>, f32)> {
    if grads.groups.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::GroupMismatch {
            index: grads.groups.len().min(params.len()),
        });
    }
    for (i, (p, g)) in params.groups().iter().zip(&grads.groups).enumerate() {
        if p.value.shape() != g.shape() || state.m[i].len() != g.len() || state.v[i].len() != g.len() {
            return Err(Error::GroupMismatch { index: i });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::powf(cfg.beta1, t as f32);
    let bc2 = 1.0 - libm::powf(cfg.beta2, t as f32);
    let mut group_rms = Vec::with_capacity(params.len());
    for (i, group) in params.groups_mut().iter_mut().enumerate() {
        let decay = if group.kind.decays() { cfg.weight_decay } else { 0.0 };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let g = grads.groups[i].data();
        let mut ss = 0.0f32;
        for (j, theta) in group.value.data_mut().iter_mut().enumerate() {
            let gj = g[j].to_f32();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let u = lr * m_hat / (libm::sqrtf(v_hat) + cfg.eps);
            ss += u * u;
            let th = theta.to_f32();
            *theta = bf16_encode(th - u - lr * decay * th);
        }
        group_rms.push(libm::sqrtf(ss / g.len().max(1) as f32));
    }
    let r_t = max_rms(&group_rms);
    Ok((group_rms, r_t))
}

/// Norm, optional clipping and the AdamW update for logical step `step`
/// (1-based; the learning rate is `lr_schedule(step)`).
pub fn optimizer_step(
    params: &mut ParameterSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<UpdateReport> {
    let lr = lr_schedule(cfg, step);
    let grad_norm_pre = global_grad_norm(grads);
    let (clipped, grad_norm_post) = match cfg.clip {
        Some(tau) if !(grad_norm_pre <= tau) => {
            let c = clip_gradients(grads, grad_norm_pre, tau);
            let n = global_grad_norm(&c);
            (Some(c), n)
        }
        _ => (None, grad_norm_pre),
    };
    let (group_rms, r_t) = adamw_step(params, clipped.as_ref().unwrap_or(grads), state, cfg, lr)?;
    Ok(UpdateReport {
        group_rms,
        r_t,
        grad_norm_pre,
        grad_norm_post,
        lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GroupKind, ParamGroup};
    use crate::Bf16;
    use alloc::string::String;
    use alloc::vec;

    fn grads(groups: &[&[f32]]) -> GradientSet {
        GradientSet {
            groups: groups
                .iter()
                .map(|g| Bf16Matrix::from_f32(1, g.len(), g).unwrap())
                .collect(),
        }
    }

    fn params(groups: &[&[f32]]) -> ParameterSet {
        ParameterSet::from_groups(
            groups
                .iter()
                .enumerate()
                .map(|(i, g)| ParamGroup {
                    name: alloc::format!("g{i}"),
                    kind: GroupKind::Projection,
                    value: Bf16Matrix::from_f32(1, g.len(), g).unwrap(),
                })
                .collect(),
        )
    }

    #[test]
    fn schedule_endpoints() {
        let c = AdamWConfig::default();
        assert_eq!(lr_schedule(&c, 0), 0.0);
        assert_eq!(lr_schedule(&c, 100), 1e-3);
        assert_eq!(lr_schedule(&c, 50), 5e-4);
        assert_eq!(lr_schedule(&c, 10_000), 0.0);
        let step = 5_050u64;
        let frac = (step - 100) as f64 / 9_900.0;
        let want = 1e-3 * 0.5 * (1.0 + (core::f64::consts::PI * frac).cos());
        assert!((lr_schedule(&c, step) as f64 - want).abs() < 1e-9);
    }

    #[test]
    fn norm_examples() {
        assert_eq!(global_grad_norm(&grads(&[&[3.0], &[4.0]])), 5.0);
        assert_eq!(global_grad_norm(&grads(&[&[0.0, 0.0], &[0.0]])), 0.0);
        assert_eq!(global_grad_norm(&grads(&[&[1.0, f32::INFINITY]])), f32::INFINITY);
        assert!(global_grad_norm(&grads(&[&[f32::NAN, 1.0]])).is_nan());
        // squares past f32::MAX overflow the plain sum
        assert_eq!(global_grad_norm(&grads(&[&[1e20]])), f32::INFINITY);
    }

    #[test]
    fn clip_examples() {
        let g = grads(&[&[0.5]]);
        assert_eq!(clip_gradients(&g, 2.0, 1.0).groups[0].get(0, 0).to_f32(), 0.25);
        assert_eq!(clip_gradients(&g, 0.5, 1.0), g);
        let g = grads(&[&[0.5, -3.0], &[f32::INFINITY]]);
        let c = clip_gradients(&g, f32::INFINITY, 1.0);
        assert_eq!(c.groups[0].to_f32_vec(), vec![0.0, 0.0]);
        assert!(c.groups[1].get(0, 0).is_nan());
    }

    #[test]
    fn first_step_bias_correction_cancels() {
        let mut p = params(&[&[0.0]]);
        let g = grads(&[&[1.0]]);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let (rms, r) = adamw_step(&mut p, &g, &mut s, &cfg, 1e-3).unwrap();
        let want = 1e-3f64 / (1.0 + 1e-8);
        assert!((rms[0] as f64 - want).abs() < 1e-9, "{}", rms[0]);
        assert_eq!(r, rms[0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn r_t_is_max_group_rms() {
        let r = max_rms(&[libm::sqrtf((9e-6 + 16e-6) / 2.0), 1e-3]);
        assert!((r - 3.5355e-3).abs() < 1e-7);
        assert_eq!(max_rms(&[1e-3, 2e-3]), max_rms(&[2e-3, 1e-3]));
        assert!(max_rms(&[1e-3, f32::NAN]).is_nan());
    }

    #[test]
    fn norm_gains_skip_weight_decay() {
        let mut p = ParameterSet::from_groups(vec![ParamGroup {
            name: String::from("n"),
            kind: GroupKind::NormGain,
            value: Bf16Matrix::filled(1, 1, Bf16::ONE),
        }]);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        adamw_step(&mut p, &grads(&[&[0.0]]), &mut s, &cfg, 0.1).unwrap();
        assert_eq!(p.value(0).get(0, 0), Bf16::ONE);
    }

    #[test]
    fn mismatched_groups_are_rejected() {
        let mut p = params(&[&[0.0, 1.0]]);
        let mut s = OptimizerState::new(&p);
        assert!(adamw_step(&mut p, &grads(&[&[1.0]]), &mut s, &AdamWConfig::default(), 1e-3).is_err());
    }
}
