use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::bf16::{bf16_encode, Bf16};
use crate::matrix::Bf16Matrix;
use crate::{Error, Result};

/// Standard deviation used for token and position embeddings.
pub(crate) const EMBED_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Embedding,
    Projection,
    NormGain,
}

impl GroupKind {
    /// Weight decay applies to every matrix group except norm gains.
    pub fn decays(self) -> bool {
        !matches!(self, GroupKind::NormGain)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
    pub value: Bf16Matrix,
}

/// Ordered parameter groups. Order and names are fixed by the config:
/// `tok_embed`, `pos_embed`, then per layer `attn_norm, wq, wk, wv, wo,
/// ffn_norm, w_gate, w_up, w_down`, then `final_norm` and `head`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterSet {
    groups: Vec<ParamGroup>,
}

pub(crate) const TOK: usize = 0;
pub(crate) const POS: usize = 1;
pub(crate) const PER_LAYER: usize = 9;

pub(crate) mod slot {
    pub const ATTN_NORM: usize = 0;
    pub const WQ: usize = 1;
    pub const WK: usize = 2;
    pub const WV: usize = 3;
    pub const WO: usize = 4;
    pub const FFN_NORM: usize = 5;
    pub const W_GATE: usize = 6;
    pub const W_UP: usize = 7;
    pub const W_DOWN: usize = 8;
}

#[inline]
pub(crate) fn layer_group(layer: usize, slot: usize) -> usize {
    2 + layer * PER_LAYER + slot
}

#[inline]
pub(crate) fn final_norm_group(cfg: &ModelConfig) -> usize {
    2 + cfg.n_layers * PER_LAYER
}

#[inline]
pub(crate) fn head_group(cfg: &ModelConfig) -> usize {
    3 + cfg.n_layers * PER_LAYER
}

fn layout(cfg: &ModelConfig) -> Vec<(String, GroupKind, usize, usize)> {
    let d = cfg.d_model;
    let ff = cfg.d_ff();
    let mut out = Vec::with_capacity(4 + cfg.n_layers * PER_LAYER);
    out.push((String::from("tok_embed"), GroupKind::Embedding, cfg.vocab_size, d));
    out.push((String::from("pos_embed"), GroupKind::Embedding, cfg.seq_len, d));
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        out.push((p("attn_norm"), GroupKind::NormGain, 1, d));
        out.push((p("wq"), GroupKind::Projection, d, d));
        out.push((p("wk"), GroupKind::Projection, d, d));
        out.push((p("wv"), GroupKind::Projection, d, d));
        out.push((p("wo"), GroupKind::Projection, d, d));
        out.push((p("ffn_norm"), GroupKind::NormGain, 1, d));
        out.push((p("w_gate"), GroupKind::Projection, d, ff));
        out.push((p("w_up"), GroupKind::Projection, d, ff));
        out.push((p("w_down"), GroupKind::Projection, ff, d));
    }
    out.push((String::from("final_norm"), GroupKind::NormGain, 1, d));
    out.push((String::from("head"), GroupKind::Projection, d, cfg.vocab_size));
    out
}

impl ParameterSet {
    /// Seeded initialization. Embeddings draw from N(0, 0.02^2), projections
    /// from N(0, 1/fan_in) (fan_in is `d_model` for all but `w_down`), gains
    /// start at one. Draws come from one ChaCha8 stream in group order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = layout(cfg)
            .into_iter()
            .map(|(name, kind, rows, cols)| {
                let value = match kind {
                    GroupKind::NormGain => Bf16Matrix::filled(rows, cols, Bf16::ONE),
                    GroupKind::Embedding | GroupKind::Projection => {
                        let std = match kind {
                            GroupKind::Embedding => EMBED_STD,
                            _ => 1.0 / libm::sqrtf(rows as f32),
                        };
                        let data = (0..rows * cols)
                            .map(|_| {
                                let z: f32 = StandardNormal.sample(&mut rng);
                                bf16_encode(z * std)
                            })
                            .collect();
                        Bf16Matrix::new(rows, cols, data).expect("layout shape")
                    }
                };
                ParamGroup { name, kind, value }
            })
            .collect();
        Ok(ParameterSet { groups })
    }

    pub fn from_groups(groups: Vec<ParamGroup>) -> Self {
        ParameterSet { groups }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn value(&self, index: usize) -> &Bf16Matrix {
        &self.groups[index].value
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    /// Check that `other` has the same group names and shapes.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::GroupMismatch {
                index: self.groups.len().min(other.groups.len()),
            });
        }
        for (i, (a, b)) in self.groups.iter().zip(&other.groups).enumerate() {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::GroupMismatch { index: i });
            }
        }
        Ok(())
    }

    /// Zero-filled gradient set with this set's shapes.
    pub fn zeros_like(&self) -> GradientSet {
        GradientSet {
            groups: self
                .groups
                .iter()
                .map(|g| Bf16Matrix::zeros(g.value.rows(), g.value.cols()))
                .collect(),
        }
    }
}

/// One gradient matrix per parameter group, index-aligned with [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientSet {
    pub groups: Vec<Bf16Matrix>,
}

impl GradientSet {
    pub fn all_finite(&self) -> bool {
        self.groups.iter().all(|g| g.all_finite())
    }

    pub fn entries(&self) -> impl Iterator<Item = Bf16> + '_ {
        self.groups.iter().flat_map(|g| g.data().iter().copied())
    }
}
