//! One training run's mutable state and the plain (unguarded) step.

use alloc::vec::Vec;

use crate::data::{Batch, BatchStream};
use crate::gemm::FaultHook;
use crate::model::{backward, evaluate_loss, forward, CorruptedCall, GemmTap, GradientSet, ModelConfig, ParameterSet};
use crate::optim::{optimizer_step, AdamWConfig, OptimizerState, UpdateReport};
use crate::Result;

/// What one forward/backward/update pass produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// 1-based logical step number.
    pub step: u64,
    pub loss: f32,
    pub max_attn_logit: f32,
    pub update: UpdateReport,
    pub corrupted: Vec<CorruptedCall>,
    pub gemm_calls: u64,
}

/// Gradient rewrite applied between backward and the optimizer. Test-only
/// plumbing for injecting gradients directly.
pub type GradientEdit<'a> = &'a mut dyn FnMut(u64, &mut GradientSet);

#[derive(Clone, Debug)]
pub struct Trainer {
    model: ModelConfig,
    optim: AdamWConfig,
    params: ParameterSet,
    state: OptimizerState,
    data: BatchStream,
}

impl Trainer {
    pub fn new(model: ModelConfig, optim: AdamWConfig, params: ParameterSet, data: BatchStream) -> Result<Self> {
        model.validate()?;
        optim.validate()?;
        if data.seq_len() != model.seq_len {
            return Err(crate::Error::InvalidConfig("data seq_len differs from model seq_len"));
        }
        let reference = ParameterSet::init(&model, 0)?;
        reference.check_compatible(&params)?;
        let state = OptimizerState::new(&params);
        Ok(Trainer { model, optim, params, state, data })
    }

    /// Fresh parameters from `seed`.
    pub fn from_seed(model: ModelConfig, optim: AdamWConfig, seed: u64, data: BatchStream) -> Result<Self> {
        let params = ParameterSet::init(&model, seed)?;
        Trainer::new(model, optim, params, data)
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn optim_config(&self) -> &AdamWConfig {
        &self.optim
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.state
    }

    pub fn data(&self) -> &BatchStream {
        &self.data
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.state.t
    }

    pub(crate) fn restore_parts(&mut self, params: &ParameterSet, state: &OptimizerState, cursor: u64) {
        self.params.clone_from(params);
        self.state.clone_from(state);
        self.data.set_cursor(cursor);
    }

    pub(crate) fn replace_parts(&mut self, params: ParameterSet, state: OptimizerState, cursor: u64) {
        self.params = params;
        self.state = state;
        self.data.set_cursor(cursor);
    }

    pub fn train_step(&mut self, hook: Option<&dyn FaultHook>) -> Result<StepOutcome> {
        self.train_step_edit(hook, None)
    }

    /// [`Self::train_step`] with an optional gradient rewrite before the update.
    pub fn train_step_edit(&mut self, hook: Option<&dyn FaultHook>, edit: Option<GradientEdit<'_>>) -> Result<StepOutcome> {
        let step = self.state.t + 1;
        let batch = self.data.next_batch();
        let mut tap = GemmTap::new(hook);
        let record = forward(&self.model, &self.params, &batch, &mut tap)?;
        let mut grads = backward(&self.model, &self.params, &record, &batch, &mut tap)?;
        if let Some(f) = edit {
            f(step, &mut grads);
        }
        let update = optimizer_step(&mut self.params, &grads, &mut self.state, &self.optim, step)?;
        Ok(StepOutcome {
            step,
            loss: record.loss,
            max_attn_logit: record.max_attn_logit,
            update,
            corrupted: tap.corrupted,
            gemm_calls: tap.calls,
        })
    }

    pub fn eval_loss(&self, batches: &[Batch]) -> Result<f32> {
        evaluate_loss(&self.model, &self.params, batches)
    }
}
