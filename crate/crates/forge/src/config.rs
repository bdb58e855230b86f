//! Flat TOML run configuration.
//!
//! Every key is optional and falls back to the desk-scale default. Unknown
//! keys are rejected. Campaign axes use the `grid_` prefix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sdc_forge_core::detector::DetectorConfig;
use sdc_forge_core::fault::{ElementMode, FaultSchedule, FaultSpec, ScheduleMode, SiteSelection, SiteSelector};
use sdc_forge_core::guard::{GuardConfig, Mode};
use sdc_forge_core::model::{find_site, ModelConfig};
use sdc_forge_core::optim::AdamWConfig;
use sdc_forge_core::Operand;

use crate::error::{ConfigError, ForgeError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Baseline,
    Fault,
    Guarded,
}

impl RunMode {
    pub fn to_core(self) -> Mode {
        match self {
            RunMode::Baseline => Mode::Baseline,
            RunMode::Fault => Mode::Fault,
            RunMode::Guarded => Mode::Guarded,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Fault => "fault",
            RunMode::Guarded => "guarded",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(RunMode::Baseline),
            "fault" => Ok(RunMode::Fault),
            "guarded" => Ok(RunMode::Guarded),
            other => Err(format!("unknown mode `{other}` (expected baseline, fault or guarded)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Rate,
    Window,
    RateRandomDuration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ElementSetting {
    Index(usize),
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub steps: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_batches: usize,
    pub batch_size: usize,
    /// `"synthetic"` or a path to a byte corpus.
    pub corpus: String,
    pub corpus_bytes: usize,
    pub corpus_seed: u64,
    pub out_dir: PathBuf,
    /// Run directory of a baseline to diff final parameters against.
    pub baseline: Option<PathBuf>,

    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seq_len: usize,
    pub ffn_mult: usize,

    pub lr_max: f32,
    pub warmup_steps: u64,
    /// Schedule horizon; defaults to `steps`.
    pub total_steps: Option<u64>,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Clip threshold; 0 disables clipping.
    pub clip: f32,

    /// `false` runs fault and guarded modes without any injection.
    pub fault_enabled: bool,
    pub fault_sites: Vec<String>,
    pub fault_bits: Vec<u8>,
    /// Explicit mask; overrides `fault_bits` when non-zero.
    pub fault_mask: u16,
    pub fault_element: ElementSetting,
    pub fault_operand: String,
    pub fault_schedule: ScheduleKind,
    pub fault_one_in: u64,
    pub fault_start: u64,
    pub fault_duration: u64,
    pub fault_dur_min: u64,
    pub fault_dur_max: u64,
    pub fault_seed: u64,
    pub fault_site_selection: String,
    pub inject_during_recompute: bool,

    pub alpha: f32,
    pub detector_warmup: u32,
    pub min_steps: u64,

    pub grid_bits: Vec<u8>,
    pub grid_sites: Vec<String>,
    pub grid_rates: Vec<u64>,
    pub grid_durations: Vec<u64>,
    pub grid_alphas: Vec<f32>,
    pub grid_modes: Vec<RunMode>,
    pub grace_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let o = AdamWConfig::default();
        let d = DetectorConfig::default();
        RunConfig {
            mode: RunMode::Baseline,
            seeds: vec![0],
            steps: 1000,
            eval_every: 100,
            eval_batches: 16,
            batch_size: 16,
            corpus: "synthetic".into(),
            corpus_bytes: 1 << 20,
            corpus_seed: 0,
            out_dir: PathBuf::from("runs"),
            baseline: None,
            vocab_size: m.vocab_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            seq_len: m.seq_len,
            ffn_mult: m.ffn_mult,
            lr_max: o.lr_max,
            warmup_steps: o.warmup_steps,
            total_steps: None,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip: o.clip.unwrap_or(0.0),
            fault_enabled: true,
            fault_sites: vec!["BP*".into()],
            fault_bits: vec![14],
            fault_mask: 0,
            fault_element: ElementSetting::Index(0),
            fault_operand: "A".into(),
            fault_schedule: ScheduleKind::Rate,
            fault_one_in: 10,
            fault_start: 500,
            fault_duration: 1,
            fault_dur_min: 1,
            fault_dur_max: 5,
            fault_seed: 0,
            fault_site_selection: "fixed".into(),
            inject_during_recompute: false,
            alpha: d.alpha,
            detector_warmup: d.warmup,
            min_steps: d.min_steps,
            grid_bits: Vec::new(),
            grid_sites: Vec::new(),
            grid_rates: Vec::new(),
            grid_durations: Vec::new(),
            grid_alphas: Vec::new(),
            grid_modes: Vec::new(),
            grace_steps: 2,
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ForgeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::io(path, e))?;
        Ok(Self::from_toml_str(&text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            seq_len: self.seq_len,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_max: self.lr_max,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps.unwrap_or(self.steps).max(self.warmup_steps),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip: (self.clip > 0.0).then_some(self.clip),
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            alpha: self.alpha,
            warmup: self.detector_warmup,
            min_steps: self.min_steps,
        }
    }

    pub fn guard(&self) -> GuardConfig {
        GuardConfig {
            inject_during_recompute: self.inject_during_recompute,
        }
    }

    pub fn bitmask(&self) -> u16 {
        if self.fault_mask != 0 {
            self.fault_mask
        } else {
            self.fault_bits.iter().fold(0u16, |m, &b| m | (1u16 << b))
        }
    }

    pub fn site_selector(&self) -> Result<SiteSelector, ConfigError> {
        parse_sites(&self.model(), &self.fault_sites, "fault_sites")
    }

    pub fn fault_spec(&self) -> Result<FaultSpec, ConfigError> {
        let element = match &self.fault_element {
            ElementSetting::Index(i) => ElementMode::Single(*i),
            ElementSetting::Keyword(k) if k == "all" => ElementMode::All,
            ElementSetting::Keyword(k) => {
                return Err(invalid("fault_element", format!("expected an index or \"all\", got `{k}`")))
            }
        };
        let operand = match self.fault_operand.as_str() {
            "A" | "a" => Operand::A,
            "B" | "b" => Operand::B,
            other => return Err(invalid("fault_operand", format!("expected A or B, got `{other}`"))),
        };
        Ok(FaultSpec {
            sites: self.site_selector()?,
            bitmask: self.bitmask(),
            element,
            operand,
        })
    }

    pub fn fault_schedule(&self) -> Result<FaultSchedule, ConfigError> {
        let mode = match self.fault_schedule {
            ScheduleKind::Rate => ScheduleMode::Rate { one_in: self.fault_one_in },
            ScheduleKind::Window => ScheduleMode::Window {
                start: self.fault_start,
                duration: self.fault_duration,
            },
            ScheduleKind::RateRandomDuration => ScheduleMode::RateWithRandomDuration {
                one_in: self.fault_one_in,
                dur_min: self.fault_dur_min,
                dur_max: self.fault_dur_max,
            },
        };
        let site_selection = match self.fault_site_selection.as_str() {
            "fixed" => SiteSelection::Fixed,
            "random_per_event" => SiteSelection::RandomPerEvent,
            other => {
                return Err(invalid(
                    "fault_site_selection",
                    format!("expected fixed or random_per_event, got `{other}`"),
                ))
            }
        };
        Ok(FaultSchedule {
            mode,
            seed: self.fault_seed,
            site_selection,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model()
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        self.optimizer()
            .validate()
            .map_err(|e| invalid("optimizer", e.to_string()))?;
        self.detector()
            .validate()
            .map_err(|e| invalid("alpha", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.steps == 0 {
            return Err(invalid("steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if self.vocab_size > 256 && self.corpus == "synthetic" {
            return Err(invalid("vocab_size", "byte corpora need vocab_size <= 256"));
        }
        if self.vocab_size < 256 {
            return Err(invalid("vocab_size", "byte-level tokens need vocab_size >= 256"));
        }
        if let Some(b) = self.fault_bits.iter().chain(&self.grid_bits).find(|&&b| b > 15) {
            return Err(invalid("fault_bits", format!("bit {b} is outside 0..=15")));
        }
        if self.mode != RunMode::Baseline && self.fault_enabled && self.bitmask() == 0 && self.grid_bits.is_empty() {
            return Err(invalid("fault_bits", "fault injection needs a non-zero mask"));
        }
        self.fault_spec()?;
        self.fault_schedule()?;
        match self.fault_schedule {
            ScheduleKind::Rate | ScheduleKind::RateRandomDuration if self.fault_one_in == 0 => {
                return Err(invalid("fault_one_in", "must be >= 1"));
            }
            ScheduleKind::Window if self.fault_duration == 0 => {
                return Err(invalid("fault_duration", "must be >= 1"));
            }
            ScheduleKind::RateRandomDuration if self.fault_dur_min == 0 || self.fault_dur_max < self.fault_dur_min => {
                return Err(invalid("fault_dur_min", "need 1 <= fault_dur_min <= fault_dur_max"));
            }
            _ => {}
        }
        for s in &self.grid_sites {
            parse_sites(&self.model(), std::slice::from_ref(s), "grid_sites")?;
        }
        if self.grid_rates.contains(&0) {
            return Err(invalid("grid_rates", "rates are one_in values and must be >= 1"));
        }
        if self.grid_durations.contains(&0) {
            return Err(invalid("grid_durations", "durations must be >= 1"));
        }
        if let Some(a) = self.grid_alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(invalid("grid_alphas", format!("alpha {a} is outside (0, 1]")));
        }
        Ok(())
    }
}

/// `FP*`, `BP*`, `*`, `FP3`, `BP:l0.ffn_down.dX` and friends.
pub fn parse_sites(model: &ModelConfig, items: &[String], field: &str) -> Result<SiteSelector, ConfigError> {
    if items.is_empty() {
        return Err(invalid(field, "no sites given"));
    }
    if items.len() == 1 {
        match items[0].trim() {
            "*" => return Ok(SiteSelector::All),
            "FP*" | "fp*" => return Ok(SiteSelector::AllForward),
            "BP*" | "bp*" => return Ok(SiteSelector::AllBackward),
            _ => {}
        }
    }
    let mut ids = Vec::with_capacity(items.len());
    for (i, s) in items.iter().enumerate() {
        let id = find_site(model, s).ok_or_else(|| invalid(&format!("{field}[{i}]"), format!("unknown GEMM site `{s}`")))?;
        ids.push(id);
    }
    Ok(SiteSelector::Sites(ids))
}
