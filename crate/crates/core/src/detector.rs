//! Online detector for harmful parameter updates.
//!
//! Signals per step: `R_t`, the largest per-group RMS of the adaptive update,
//! and the pre-clip global gradient norm `G_t`. With
//! `dR = |R_t - R_{t-1}|`, `dG = max(0, G_t - G_{t-1})` and `mu` the mean of
//! `dR` over the first clean warm-up steps, a step is anomalous when
//! `dR > mu / (alpha * sqrt(dG))`, or when either signal is not finite.
//! Both previous values start at zero.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorConfig {
    pub alpha: f32,
    /// Warm-up length `t_w`: how many clean samples feed `mu`.
    pub warmup: u32,
    /// The threshold rule only fires for `step > min_steps`.
    pub min_steps: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            alpha: 0.05,
            warmup: 100,
            min_steps: 10,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1]"));
        }
        if self.warmup == 0 {
            return Err(Error::InvalidConfig("detector warmup must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reason {
    None,
    NonFiniteNorm,
    ThresholdExceeded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: Reason,
    pub delta_r: f32,
    pub delta_g: f32,
    /// `mu / (alpha * sqrt(dG))`; +Inf while the rule cannot fire.
    pub threshold: f32,
}

impl Decision {
    pub fn is_anomalous(&self) -> bool {
        self.verdict == Verdict::Anomalous
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorState {
    pub config: DetectorConfig,
    pub prev_r: f32,
    pub prev_g: f32,
    pub sum_delta_r: f32,
    pub samples: u32,
    /// Last step observed, `None` before the first.
    pub last_step: Option<u64>,
}

impl DetectorState {
    pub fn new(config: DetectorConfig) -> Self {
        DetectorState {
            config,
            prev_r: 0.0,
            prev_g: 0.0,
            sum_delta_r: 0.0,
            samples: 0,
            last_step: None,
        }
    }

    /// Warm-up mean of `dR`, or `None` before the first clean sample.
    pub fn mu(&self) -> Option<f32> {
        (self.samples > 0).then(|| self.sum_delta_r / self.samples as f32)
    }

    fn check_order(&self, step: u64) -> Result<()> {
        match self.last_step {
            Some(last) if step <= last => Err(Error::OutOfOrderStep { last, got: step }),
            _ => Ok(()),
        }
    }

    /// The verdict for `(r_t, g_pre)` against the current state, no mutation.
    pub fn evaluate(&self, r_t: f32, g_pre: f32, step: u64) -> Decision {
        let delta_r = libm::fabsf(r_t - self.prev_r);
        let delta_g = libm::fmaxf(0.0, g_pre - self.prev_g);
        if !r_t.is_finite() || !g_pre.is_finite() {
            return Decision {
                verdict: Verdict::Anomalous,
                reason: Reason::NonFiniteNorm,
                delta_r,
                delta_g: if g_pre.is_finite() { delta_g } else { g_pre - self.prev_g },
                threshold: f32::INFINITY,
            };
        }
        let threshold = match self.mu() {
            Some(mu) if delta_g > 0.0 => mu / (self.config.alpha * libm::sqrtf(delta_g)),
            _ => f32::INFINITY,
        };
        let fires = step > self.config.min_steps && delta_g > 0.0 && delta_r > threshold;
        Decision {
            verdict: if fires { Verdict::Anomalous } else { Verdict::Ok },
            reason: if fires { Reason::ThresholdExceeded } else { Reason::None },
            delta_r,
            delta_g,
            threshold,
        }
    }

    fn absorb(&mut self, r_t: f32, g_pre: f32, step: u64, decision: &Decision) {
        self.last_step = Some(step);
        if decision.reason == Reason::NonFiniteNorm {
            return;
        }
        if decision.verdict == Verdict::Ok && self.samples < self.config.warmup {
            self.sum_delta_r += decision.delta_r;
            self.samples += 1;
        }
        self.prev_r = r_t;
        self.prev_g = g_pre;
    }

    /// Feed one completed step. Steps must strictly increase.
    ///
    /// Non-finite samples leave the previous values untouched. Finite
    /// samples always become the new previous values; `mu` only absorbs
    /// clean ones.
    pub fn observe(&mut self, r_t: f32, g_pre: f32, step: u64) -> Result<Decision> {
        self.check_order(step)?;
        let d = self.evaluate(r_t, g_pre, step);
        self.absorb(r_t, g_pre, step, &d);
        Ok(d)
    }

    /// Called on the pre-step state after a recomputation replaced the
    /// step's update: the recomputed signals become the previous values and
    /// feed `mu` while still in warm-up, unless they would themselves be
    /// flagged. Returns the verdict the recomputed step receives.
    pub fn reset_after_recompute(&mut self, r_t: f32, g_pre: f32, step: u64) -> Result<Decision> {
        self.check_order(step)?;
        let d = self.evaluate(r_t, g_pre, step);
        self.absorb(r_t, g_pre, step, &d);
        Ok(d)
    }
}
