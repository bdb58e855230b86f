use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::ModelConfig;
use crate::gemm::{GemmSiteId, Pass};

pub(crate) mod fwd {
    pub const Q: u16 = 0;
    pub const K: u16 = 1;
    pub const V: u16 = 2;
    pub const SCORES: u16 = 3;
    pub const VALUES: u16 = 4;
    pub const O: u16 = 5;
    pub const GATE: u16 = 6;
    pub const UP: u16 = 7;
    pub const DOWN: u16 = 8;
    pub const PER_LAYER: u16 = 9;
    pub const LABELS: [&str; 9] = [
        "q_proj",
        "k_proj",
        "v_proj",
        "attn_scores",
        "attn_values",
        "o_proj",
        "ffn_gate",
        "ffn_up",
        "ffn_down",
    ];
}

pub(crate) mod bwd {
    pub const HEAD_DW: u16 = 0;
    pub const HEAD_DX: u16 = 1;
    pub const DOWN_DW: u16 = 0;
    pub const DOWN_DX: u16 = 1;
    pub const UP_DW: u16 = 2;
    pub const UP_DX: u16 = 3;
    pub const GATE_DW: u16 = 4;
    pub const GATE_DX: u16 = 5;
    pub const O_DW: u16 = 6;
    pub const O_DX: u16 = 7;
    pub const VALUES_DP: u16 = 8;
    pub const VALUES_DV: u16 = 9;
    pub const SCORES_DQ: u16 = 10;
    pub const SCORES_DK: u16 = 11;
    pub const Q_DW: u16 = 12;
    pub const Q_DX: u16 = 13;
    pub const K_DW: u16 = 14;
    pub const K_DX: u16 = 15;
    pub const V_DW: u16 = 16;
    pub const V_DX: u16 = 17;
    pub const PER_LAYER: u16 = 18;
    pub const LABELS: [&str; 18] = [
        "ffn_down.dW",
        "ffn_down.dX",
        "ffn_up.dW",
        "ffn_up.dX",
        "ffn_gate.dW",
        "ffn_gate.dX",
        "o_proj.dW",
        "o_proj.dX",
        "attn_values.dP",
        "attn_values.dV",
        "attn_scores.dQ",
        "attn_scores.dK",
        "q_proj.dW",
        "q_proj.dX",
        "k_proj.dW",
        "k_proj.dX",
        "v_proj.dW",
        "v_proj.dX",
    ];
}

#[inline]
pub(crate) fn fwd_site(layer: usize, role: u16) -> GemmSiteId {
    GemmSiteId::forward(layer as u16 * fwd::PER_LAYER + role)
}

#[inline]
pub(crate) fn fwd_head(cfg: &ModelConfig) -> GemmSiteId {
    GemmSiteId::forward(cfg.n_layers as u16 * fwd::PER_LAYER)
}

/// Backward sites are numbered in call order: the head first, then layers
/// from last to first.
#[inline]
pub(crate) fn bwd_site(cfg: &ModelConfig, layer: usize, role: u16) -> GemmSiteId {
    let rank = (cfg.n_layers - 1 - layer) as u16;
    GemmSiteId::backward(2 + rank * bwd::PER_LAYER + role)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteInfo {
    pub id: GemmSiteId,
    /// Structural label, e.g. `l0.attn_scores` or `l1.ffn_down.dX`.
    pub label: String,
    /// The GEMM producing pre-softmax attention logits.
    pub attention_scores: bool,
}

/// All GEMM sites of one training step: forward sites in call order,
/// followed by backward sites in call order.
pub fn enumerate_gemm_sites(cfg: &ModelConfig) -> Vec<SiteInfo> {
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for (role, name) in fwd::LABELS.iter().enumerate() {
            out.push(SiteInfo {
                id: fwd_site(l, role as u16),
                label: format!("l{l}.{name}"),
                attention_scores: role as u16 == fwd::SCORES,
            });
        }
    }
    out.push(SiteInfo {
        id: fwd_head(cfg),
        label: String::from("head"),
        attention_scores: false,
    });
    out.push(SiteInfo {
        id: GemmSiteId::backward(bwd::HEAD_DW),
        label: String::from("head.dW"),
        attention_scores: false,
    });
    out.push(SiteInfo {
        id: GemmSiteId::backward(bwd::HEAD_DX),
        label: String::from("head.dX"),
        attention_scores: false,
    });
    for l in (0..cfg.n_layers).rev() {
        for (role, name) in bwd::LABELS.iter().enumerate() {
            out.push(SiteInfo {
                id: bwd_site(cfg, l, role as u16),
                label: format!("l{l}.{name}"),
                attention_scores: false,
            });
        }
    }
    out
}

/// Resolve `FP3` / `BP12` style ids or `FP:l0.attn_scores` style labels.
pub fn find_site(cfg: &ModelConfig, text: &str) -> Option<GemmSiteId> {
    let text = text.trim();
    let sites = enumerate_gemm_sites(cfg);
    let (pass, rest) = if let Some(r) = text.strip_prefix("FP").or_else(|| text.strip_prefix("fp")) {
        (Pass::Forward, r)
    } else if let Some(r) = text.strip_prefix("BP").or_else(|| text.strip_prefix("bp")) {
        (Pass::Backward, r)
    } else {
        return None;
    };
    if let Some(label) = rest.strip_prefix(':') {
        return sites
            .iter()
            .find(|s| s.id.pass == pass && s.label == label)
            .map(|s| s.id);
    }
    let ordinal: u16 = rest.parse().ok()?;
    sites
        .iter()
        .find(|s| s.id.pass == pass && s.id.ordinal == ordinal)
        .map(|s| s.id)
}
