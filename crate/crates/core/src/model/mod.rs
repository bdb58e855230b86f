//! Tiny decoder-only transformer: learned token and position embeddings,
//! pre-norm blocks with causal multi-head attention and a SiLU-gated FFN,
//! a final RMSNorm and an untied output head.
//!
//! Every matrix product goes through [`crate::gemm`] with a stable
//! [`crate::GemmSiteId`]; see [`enumerate_gemm_sites`] for the labels.

mod params;
mod sites;
mod transformer;

pub use params::{GradientSet, GroupKind, ParamGroup, ParameterSet};
pub use sites::{enumerate_gemm_sites, find_site, SiteInfo};
pub use transformer::{backward, evaluate_loss, forward, CorruptedCall, ForwardRecord, GemmTap};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            seq_len: 64,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.seq_len == 0
            || self.ffn_mult == 0
        {
            return Err(Error::InvalidConfig("model sizes must all be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig("d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Closed-form parameter count for this architecture.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_ff();
        self.vocab_size * d + self.seq_len * d + self.n_layers * per_layer + d + d * self.vocab_size
    }
}
