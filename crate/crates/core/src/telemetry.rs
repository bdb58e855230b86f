//! Per-step records, run summaries and the parameter difference metric.

use crate::model::ParameterSet;
use crate::Result;

pub const CSV_HEADER: [&str; 12] = [
    "step",
    "train_loss",
    "grad_norm_pre",
    "grad_norm_post",
    "max_attn_logit",
    "r_t",
    "delta_r",
    "delta_g",
    "lr",
    "fault_active",
    "detected",
    "recomputed",
];

/// One committed step, with the signals observed on its first attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTelemetry {
    pub step: u64,
    pub train_loss: f32,
    pub grad_norm_pre: f32,
    pub grad_norm_post: f32,
    pub max_attn_logit: f32,
    pub r_t: f32,
    pub delta_r: f32,
    pub delta_g: f32,
    pub lr: f32,
    pub fault_active: bool,
    pub detected: bool,
    pub recomputed: bool,
}

impl StepTelemetry {
    /// Bitwise comparison of every field (NaN equals NaN with the same bits).
    pub fn bits_eq(&self, other: &StepTelemetry) -> bool {
        let f = |a: f32, b: f32| a.to_bits() == b.to_bits();
        self.step == other.step
            && f(self.train_loss, other.train_loss)
            && f(self.grad_norm_pre, other.grad_norm_pre)
            && f(self.grad_norm_post, other.grad_norm_post)
            && f(self.max_attn_logit, other.max_attn_logit)
            && f(self.r_t, other.r_t)
            && f(self.delta_r, other.delta_r)
            && f(self.delta_g, other.delta_g)
            && f(self.lr, other.lr)
            && self.fault_active == other.fault_active
            && self.detected == other.detected
            && self.recomputed == other.recomputed
    }
}

/// `sqrt(sum (a - b)^2)` over all entries, in group then row-major order.
pub fn parameter_difference(run: &ParameterSet, baseline: &ParameterSet) -> Result<f32> {
    run.check_compatible(baseline)?;
    let mut ss = 0.0f32;
    for (a, b) in run.groups().iter().zip(baseline.groups()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            let d = x.to_f32() - y.to_f32();
            ss += d * d;
        }
    }
    Ok(libm::sqrtf(ss))
}

/// Largest value ignoring NaN; NaN only if every value is NaN or there are none.
pub fn max_ignoring_nan(values: impl IntoIterator<Item = f32>) -> f32 {
    let mut best = f32::NAN;
    for v in values {
        if !v.is_nan() && (best.is_nan() || v > best) {
            best = v;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub final_eval_loss: f32,
    pub max_grad_norm_pre: f32,
    pub max_attn_logit: f32,
    pub parameter_difference: Option<f32>,
    pub detections: u64,
    pub recomputes: u64,
    pub fault_steps: u64,
    /// Steps whose pre-clip norm was Inf or NaN.
    pub non_finite_steps: u64,
}

pub fn summarize(records: &[StepTelemetry], final_eval_loss: f32, parameter_difference: Option<f32>) -> RunSummary {
    let count = |f: fn(&StepTelemetry) -> bool| records.iter().filter(|r| f(r)).count() as u64;
    RunSummary {
        steps: records.len() as u64,
        final_eval_loss,
        max_grad_norm_pre: max_ignoring_nan(records.iter().map(|r| r.grad_norm_pre)),
        max_attn_logit: max_ignoring_nan(records.iter().map(|r| r.max_attn_logit)),
        parameter_difference,
        detections: count(|r| r.detected),
        recomputes: count(|r| r.recomputed),
        fault_steps: count(|r| r.fault_active),
        non_finite_steps: count(|r| !r.grad_norm_pre.is_finite()),
    }
}
