//! Snapshot, detect, recompute.
//!
//! [`Session`] drives one run in one of three modes. In guarded mode every
//! step is preceded by a [`StepSnapshot`]; when the detector flags the step
//! the snapshot is restored and the step replayed without injection, and the
//! replayed update is the one committed.

use alloc::vec::Vec;

use crate::detector::{Decision, DetectorConfig, DetectorState};
use crate::fault::{ActiveFaults, FaultInjector, FaultLog, FaultLogEntry};
use crate::gemm::FaultHook;
use crate::matrix::Bf16Matrix;
use crate::model::{ParamGroup, ParameterSet};
use crate::optim::OptimizerState;
use crate::telemetry::StepTelemetry;
use crate::trainer::{StepOutcome, Trainer};
use crate::{Bf16, Error, Result};

/// Full pre-step state. The batch sampler is keyed by its cursor and the
/// injector is a pure function of the step, so nothing else is needed for
/// a bit-exact replay.
#[derive(Clone, Debug)]
pub struct StepSnapshot {
    pub params: ParameterSet,
    pub optimizer: OptimizerState,
    pub cursor: u64,
    pub detector: DetectorState,
}

const MAGIC: &[u8; 8] = b"SDCSNAP1";
const DETECTOR_BYTES: usize = 4 + 4 + 8 + 4 + 4 + 4 + 4 + 1 + 8;

impl StepSnapshot {
    pub fn take(trainer: &Trainer, detector: &DetectorState) -> Self {
        StepSnapshot {
            params: trainer.params().clone(),
            optimizer: trainer.optimizer().clone(),
            cursor: trainer.data().cursor(),
            detector: *detector,
        }
    }

    pub fn restore(&self, trainer: &mut Trainer, detector: &mut DetectorState) {
        trainer.restore_parts(&self.params, &self.optimizer, self.cursor);
        *detector = self.detector;
    }

    pub fn step(&self) -> u64 {
        self.optimizer.t
    }

    /// Serialized size: header, then per group its shape, bf16 bits and both
    /// f32 moments, then the detector state.
    pub fn encoded_len(params: &ParameterSet) -> usize {
        let header = MAGIC.len() + 8 + 8 + 4;
        let groups: usize = params.groups().iter().map(|g| 8 + 10 * g.value.len()).sum();
        header + groups + DETECTOR_BYTES
    }

    /// Little-endian byte image. Group names and kinds are not stored;
    /// [`Self::decode`] takes them from a template parameter set.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(&self.params));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.optimizer.t.to_le_bytes());
        out.extend_from_slice(&self.cursor.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, g) in self.params.groups().iter().enumerate() {
            out.extend_from_slice(&(g.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(g.value.cols() as u32).to_le_bytes());
            for v in g.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            for x in self.optimizer.m[i].iter().chain(&self.optimizer.v[i]) {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        let d = &self.detector;
        out.extend_from_slice(&d.config.alpha.to_bits().to_le_bytes());
        out.extend_from_slice(&d.config.warmup.to_le_bytes());
        out.extend_from_slice(&d.config.min_steps.to_le_bytes());
        out.extend_from_slice(&d.prev_r.to_bits().to_le_bytes());
        out.extend_from_slice(&d.prev_g.to_bits().to_le_bytes());
        out.extend_from_slice(&d.sum_delta_r.to_bits().to_le_bytes());
        out.extend_from_slice(&d.samples.to_le_bytes());
        out.push(d.last_step.is_some() as u8);
        out.extend_from_slice(&d.last_step.unwrap_or(0).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], template: &ParameterSet) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Snapshot("bad magic"));
        }
        let t = r.u64()?;
        let cursor = r.u64()?;
        if r.u32()? as usize != template.len() {
            return Err(Error::Snapshot("group count differs from template"));
        }
        let mut groups = Vec::with_capacity(template.len());
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for g in template.groups() {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != g.value.shape() {
                return Err(Error::Snapshot("group shape differs from template"));
            }
            let n = rows * cols;
            let data = (0..n).map(|_| r.u16().map(Bf16::from_bits)).collect::<Result<Vec<_>>>()?;
            m.push((0..n).map(|_| r.u32().map(f32::from_bits)).collect::<Result<Vec<_>>>()?);
            v.push((0..n).map(|_| r.u32().map(f32::from_bits)).collect::<Result<Vec<_>>>()?);
            groups.push(ParamGroup {
                name: g.name.clone(),
                kind: g.kind,
                value: Bf16Matrix::new(rows, cols, data)?,
            });
        }
        let config = DetectorConfig {
            alpha: f32::from_bits(r.u32()?),
            warmup: r.u32()?,
            min_steps: r.u64()?,
        };
        let prev_r = f32::from_bits(r.u32()?);
        let prev_g = f32::from_bits(r.u32()?);
        let sum_delta_r = f32::from_bits(r.u32()?);
        let samples = r.u32()?;
        let has_last = r.take(1)?[0];
        let last = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Snapshot("trailing bytes"));
        }
        Ok(StepSnapshot {
            params: ParameterSet::from_groups(groups),
            optimizer: OptimizerState { m, v, t },
            cursor,
            detector: DetectorState {
                config,
                prev_r,
                prev_g,
                sum_delta_r,
                samples,
                last_step: (has_last != 0).then_some(last),
            },
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Snapshot("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adopted {
    Original,
    Recomputed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuardReport {
    pub step: u64,
    pub decision: Decision,
    pub recomputed: bool,
    pub original_delta_r: f32,
    /// NaN when the step was not recomputed.
    pub recomputed_delta_r: f32,
    pub adopted: Adopted,
    /// The detector's verdict on the recomputed step. Only one recompute
    /// is attempted per step, so a flagged recompute is still committed.
    pub recompute_decision: Option<Decision>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// No injection; the detector watches passively.
    Baseline,
    /// Injection on; the detector watches passively.
    Fault,
    /// Injection on, snapshot every step, recompute on detection.
    Guarded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GuardConfig {
    /// Keep the injector active during the replay.
    pub inject_during_recompute: bool,
}

/// Result of one [`Session::step`].
#[derive(Clone, Debug)]
pub struct StepResult {
    pub telemetry: StepTelemetry,
    /// The first attempt at the step.
    pub outcome: StepOutcome,
    /// Guarded mode only.
    pub guard: Option<GuardReport>,
}

pub struct Session {
    mode: Mode,
    trainer: Trainer,
    detector: DetectorState,
    injector: Option<FaultInjector>,
    guard: GuardConfig,
    force_next: bool,
    fault_log: FaultLog,
    spare: Option<StepSnapshot>,
}

impl Session {
    pub fn new(
        mode: Mode,
        trainer: Trainer,
        detector: DetectorConfig,
        injector: Option<FaultInjector>,
        guard: GuardConfig,
    ) -> Result<Self> {
        detector.validate()?;
        Ok(Session {
            mode,
            trainer,
            detector: DetectorState::new(detector),
            injector,
            guard,
            force_next: false,
            fault_log: FaultLog::new(),
            spare: None,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn trainer(&self) -> &Trainer {
        &self.trainer
    }

    pub fn detector(&self) -> &DetectorState {
        &self.detector
    }

    pub fn fault_log(&self) -> &FaultLog {
        &self.fault_log
    }

    pub fn injector(&self) -> Option<&FaultInjector> {
        self.injector.as_ref()
    }

    pub fn into_trainer(self) -> Trainer {
        self.trainer
    }

    /// Treat the next step as flagged regardless of the detector.
    pub fn force_next_detection(&mut self) {
        self.force_next = true;
    }

    fn plan(&self, step: u64) -> ActiveFaults {
        match (&self.injector, self.mode) {
            (Some(inj), Mode::Fault | Mode::Guarded) => inj.plan_step(step),
            _ => ActiveFaults::none(),
        }
    }

    fn log(&mut self, outcome: &StepOutcome) {
        for c in &outcome.corrupted {
            self.fault_log.push(FaultLogEntry {
                step: outcome.step,
                site: c.site,
                bitmask: c.mask,
                element: c.element,
            });
        }
    }

    fn snapshot(&mut self) -> StepSnapshot {
        // reuse the previous snapshot's buffers
        match self.spare.take() {
            Some(mut s) => {
                s.params.clone_from(self.trainer.params());
                s.optimizer.clone_from(self.trainer.optimizer());
                s.cursor = self.trainer.data().cursor();
                s.detector = self.detector;
                s
            }
            None => StepSnapshot::take(&self.trainer, &self.detector),
        }
    }

    pub fn step(&mut self) -> Result<StepResult> {
        let step = self.trainer.step() + 1;
        let plan = self.plan(step);
        let fault_active = plan.is_active();
        let hook: Option<&dyn FaultHook> = if fault_active { Some(&plan) } else { None };
        let guarded = self.mode == Mode::Guarded;
        let snapshot = guarded.then(|| self.snapshot());

        let outcome = self.trainer.train_step(hook)?;
        self.log(&outcome);
        let decision = self.detector.observe(outcome.update.r_t, outcome.update.grad_norm_pre, step)?;
        let detected = decision.is_anomalous() || core::mem::take(&mut self.force_next);

        let mut report = None;
        if let Some(snap) = snapshot {
            if detected {
                snap.restore(&mut self.trainer, &mut self.detector);
                let replay_hook = if self.guard.inject_during_recompute { hook } else { None };
                let re = self.trainer.train_step(replay_hook)?;
                self.log(&re);
                let rd = self.detector.reset_after_recompute(re.update.r_t, re.update.grad_norm_pre, step)?;
                if !re.loss.is_finite() {
                    return Err(Error::TrainingHealth { step });
                }
                report = Some(GuardReport {
                    step,
                    decision,
                    recomputed: true,
                    original_delta_r: decision.delta_r,
                    recomputed_delta_r: rd.delta_r,
                    adopted: Adopted::Recomputed,
                    recompute_decision: Some(rd),
                });
            } else {
                report = Some(GuardReport {
                    step,
                    decision,
                    recomputed: false,
                    original_delta_r: decision.delta_r,
                    recomputed_delta_r: f32::NAN,
                    adopted: Adopted::Original,
                    recompute_decision: None,
                });
            }
            self.spare = Some(snap);
        }

        let u = &outcome.update;
        let telemetry = StepTelemetry {
            step,
            train_loss: outcome.loss,
            grad_norm_pre: u.grad_norm_pre,
            grad_norm_post: u.grad_norm_post,
            max_attn_logit: outcome.max_attn_logit,
            r_t: u.r_t,
            delta_r: decision.delta_r,
            delta_g: decision.delta_g,
            lr: u.lr,
            fault_active,
            detected,
            recomputed: report.is_some_and(|r| r.recomputed),
        };
        Ok(StepResult { telemetry, outcome, guard: report })
    }

    /// Overwrite trainer and detector from a snapshot.
    pub fn restore(&mut self, snapshot: &StepSnapshot) -> Result<()> {
        self.trainer.params().check_compatible(&snapshot.params)?;
        self.trainer
            .replace_parts(snapshot.params.clone(), snapshot.optimizer.clone(), snapshot.cursor);
        self.detector = snapshot.detector;
        Ok(())
    }

    pub fn take_snapshot(&self) -> StepSnapshot {
        StepSnapshot::take(&self.trainer, &self.detector)
    }
}
