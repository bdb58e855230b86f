//! One run end to end: build the session, train, evaluate, persist.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sdc_forge_core::data::BatchStream;
use sdc_forge_core::fault::{FaultEvent, FaultInjector, FaultLog};
use sdc_forge_core::guard::{GuardReport, Session, StepResult, StepSnapshot};
use sdc_forge_core::model::{enumerate_gemm_sites, ModelConfig, ParameterSet};
use sdc_forge_core::telemetry::{parameter_difference, summarize, RunSummary, StepTelemetry};
use sdc_forge_core::trainer::Trainer;
use sdc_forge_core::GemmSiteId;

use crate::config::{RunConfig, RunMode};
use crate::corpus::load_corpus;
use crate::csv_io::{fmt_f32, parse_f32, write_records};
use crate::error::ForgeError;

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.snap";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVALS_FILE: &str = "evals.csv";
pub const FAULTS_FILE: &str = "faults.csv";
pub const GUARD_FILE: &str = "guard.csv";

/// f32 that survives JSON: finite values are numbers, the rest are the
/// strings `nan`, `inf` and `-inf`.
#[derive(Clone, Copy, Debug)]
pub struct Num(pub f32);

impl PartialEq for Num {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits() || (self.0.is_nan() && other.0.is_nan())
    }
}

impl Serialize for Num {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f32(self.0)
        } else {
            s.serialize_str(&fmt_f32(self.0))
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(x) => Ok(Num(x)),
            Raw::S(s) => parse_f32(&s)
                .map(Num)
                .ok_or_else(|| serde::de::Error::custom(format!("bad number `{s}`"))),
        }
    }
}

/// Detections split against the ground truth of the fault log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub detections: u64,
    /// Detections with a corrupted GEMM call at the step or within the
    /// preceding grace window.
    pub justified: u64,
    pub false_positives: u64,
    pub fault_events: u64,
    /// Events with a flagged step in `[start, end + grace]`.
    pub events_detected: u64,
}

impl DetectionStats {
    pub fn compute(records: &[StepTelemetry], log: &FaultLog, events: &[FaultEvent], grace: u64) -> Self {
        let flagged: Vec<u64> = records.iter().filter(|r| r.detected).map(|r| r.step).collect();
        let corrupted = log.steps();
        let justified = flagged
            .iter()
            .filter(|&&s| corrupted.iter().any(|&c| c <= s && s <= c + grace))
            .count() as u64;
        let events_detected = events
            .iter()
            .filter(|e| flagged.iter().any(|&s| e.start <= s && s <= e.end + grace))
            .count() as u64;
        DetectionStats {
            detections: flagged.len() as u64,
            justified,
            false_positives: flagged.len() as u64 - justified,
            fault_events: events.len() as u64,
            events_detected,
        }
    }
}

/// What `summary.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: RunMode,
    pub seed: u64,
    pub steps: u64,
    pub final_eval_loss: Num,
    pub max_grad_norm_pre: Num,
    pub max_attn_logit: Num,
    pub parameter_difference: Option<Num>,
    pub recomputes: u64,
    pub fault_steps: u64,
    pub non_finite_steps: u64,
    pub corrupted_calls: u64,
    pub detection: DetectionStats,
}

impl RunRecord {
    fn new(mode: RunMode, seed: u64, s: &RunSummary, corrupted_calls: u64, detection: DetectionStats) -> Self {
        RunRecord {
            mode,
            seed,
            steps: s.steps,
            final_eval_loss: Num(s.final_eval_loss),
            max_grad_norm_pre: Num(s.max_grad_norm_pre),
            max_attn_logit: Num(s.max_attn_logit),
            parameter_difference: s.parameter_difference.map(Num),
            recomputes: s.recomputes,
            fault_steps: s.fault_steps,
            non_finite_steps: s.non_finite_steps,
            corrupted_calls,
            detection,
        }
    }
}

/// Everything a finished run produced, in memory.
pub struct RunOutput {
    pub records: Vec<StepTelemetry>,
    /// `(step, eval loss)` at each periodic evaluation and at the end.
    pub evals: Vec<(u64, f32)>,
    pub guard: Vec<GuardReport>,
    pub fault_log: FaultLog,
    pub events: Vec<FaultEvent>,
    pub checkpoint: StepSnapshot,
    pub summary: RunSummary,
    pub record: RunRecord,
}

impl RunOutput {
    pub fn params(&self) -> &ParameterSet {
        &self.checkpoint.params
    }
}

/// A configured session for `seed`, not yet stepped.
pub fn build_session(cfg: &RunConfig, seed: u64, corpus: Arc<[u8]>) -> Result<Session, ForgeError> {
    let model = cfg.model();
    let data = BatchStream::new(corpus, cfg.batch_size, model.seq_len, seed, cfg.eval_batches)?;
    let trainer = Trainer::from_seed(model, cfg.optimizer(), seed, data)?;
    let injector = match cfg.mode {
        RunMode::Baseline => None,
        _ if !cfg.fault_enabled => None,
        RunMode::Fault | RunMode::Guarded => {
            let mut schedule = cfg.fault_schedule()?;
            schedule.seed = schedule.seed.wrapping_add(seed);
            Some(FaultInjector::new(cfg.fault_spec()?, schedule, &model)?)
        }
    };
    Ok(Session::new(cfg.mode.to_core(), trainer, cfg.detector(), injector, cfg.guard())?)
}

/// Train `cfg.steps` steps from a fresh session. `on_step` sees every
/// committed step. `baseline` feeds the parameter difference.
pub fn run_session(
    cfg: &RunConfig,
    seed: u64,
    mut session: Session,
    baseline: Option<&ParameterSet>,
    mut on_step: impl FnMut(&StepResult),
) -> Result<RunOutput, ForgeError> {
    let eval_set = session.trainer().data().eval_set();
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut guard = Vec::new();
    let mut evals = Vec::new();
    let first = session.trainer().step() + 1;
    for _ in 0..cfg.steps {
        let res = session.step()?;
        if cfg.eval_every > 0 && res.telemetry.step % cfg.eval_every == 0 {
            evals.push((res.telemetry.step, session.trainer().eval_loss(&eval_set)?));
        }
        records.push(res.telemetry);
        guard.extend(res.guard);
        on_step(&res);
    }
    let last = session.trainer().step();
    if evals.last().map(|e| e.0) != Some(last) {
        evals.push((last, session.trainer().eval_loss(&eval_set)?));
    }
    let final_eval = evals.last().map_or(f32::NAN, |e| e.1);
    let diff = baseline
        .map(|b| parameter_difference(session.trainer().params(), b))
        .transpose()?;
    let summary = summarize(&records, final_eval, diff);
    let events = session.injector().map(|i| i.events(first, last)).unwrap_or_default();
    let fault_log = session.fault_log().clone();
    let detection = DetectionStats::compute(&records, &fault_log, &events, cfg.grace_steps);
    let record = RunRecord::new(cfg.mode, seed, &summary, fault_log.len() as u64, detection);
    Ok(RunOutput {
        checkpoint: session.take_snapshot(),
        records,
        evals,
        guard,
        fault_log,
        events,
        summary,
        record,
    })
}

/// Build and run in memory.
pub fn run_in_memory(
    cfg: &RunConfig,
    seed: u64,
    corpus: Arc<[u8]>,
    baseline: Option<&ParameterSet>,
) -> Result<RunOutput, ForgeError> {
    let session = build_session(cfg, seed, corpus)?;
    run_session(cfg, seed, session, baseline, |_| {})
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ForgeError> {
    let mut f = std::fs::File::create(path).map_err(|e| ForgeError::io(path, e))?;
    f.write_all(bytes).map_err(|e| ForgeError::io(path, e))
}

fn site_labels(model: &ModelConfig) -> HashMap<GemmSiteId, String> {
    enumerate_gemm_sites(model).into_iter().map(|s| (s.id, s.label)).collect()
}

/// Persist a run's artifacts under `dir`. The summary goes last so its
/// presence marks a complete run.
pub fn write_run(dir: &Path, cfg: &RunConfig, seed: u64, out: &RunOutput) -> Result<(), ForgeError> {
    std::fs::create_dir_all(dir).map_err(|e| ForgeError::io(dir, e))?;
    let mut resolved = cfg.clone();
    resolved.seeds = vec![seed];
    write_file(&dir.join(CONFIG_FILE), resolved.to_toml_string().as_bytes())?;
    write_records(&dir.join(TELEMETRY_FILE), &out.records)?;

    let mut evals = String::from("step,eval_loss\n");
    for (s, l) in &out.evals {
        let _ = writeln!(evals, "{s},{}", fmt_f32(*l));
    }
    write_file(&dir.join(EVALS_FILE), evals.as_bytes())?;

    let labels = site_labels(&cfg.model());
    let mut faults = String::from("step,site,label,bitmask,element\n");
    for e in out.fault_log.entries() {
        let label = labels.get(&e.site).map_or("", String::as_str);
        let _ = writeln!(faults, "{},{},{label},{:#06x},{}", e.step, e.site, e.bitmask, e.element);
    }
    write_file(&dir.join(FAULTS_FILE), faults.as_bytes())?;

    if cfg.mode == RunMode::Guarded {
        let mut g = String::from(
            "step,verdict,reason,delta_r,delta_g,threshold,recomputed,recomputed_delta_r,recompute_verdict\n",
        );
        for r in &out.guard {
            let d = &r.decision;
            let _ = writeln!(
                g,
                "{},{:?},{:?},{},{},{},{},{},{}",
                r.step,
                d.verdict,
                d.reason,
                fmt_f32(d.delta_r),
                fmt_f32(d.delta_g),
                fmt_f32(d.threshold),
                r.recomputed as u8,
                fmt_f32(r.recomputed_delta_r),
                r.recompute_decision.map_or(String::new(), |x| format!("{:?}", x.verdict)),
            );
        }
        write_file(&dir.join(GUARD_FILE), g.as_bytes())?;
    }

    write_file(&dir.join(CHECKPOINT_FILE), &out.checkpoint.encode())?;
    let json = serde_json::to_string_pretty(&out.record).expect("summary serializes");
    write_file(&dir.join(SUMMARY_FILE), (json + "\n").as_bytes())
}

pub fn read_summary(dir: &Path) -> Result<RunRecord, ForgeError> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| ForgeError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| ForgeError::parse(&path, e.line() as u64, e.to_string()))
}

pub fn read_run_config(dir: &Path) -> Result<RunConfig, ForgeError> {
    RunConfig::load(&dir.join(CONFIG_FILE))
}

/// Final checkpoint of the run in `dir`, decoded against `model`'s layout.
pub fn load_checkpoint(dir: &Path, model: &ModelConfig) -> Result<StepSnapshot, ForgeError> {
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).map_err(|e| ForgeError::io(&path, e))?;
    let template = ParameterSet::init(model, 0)?;
    Ok(StepSnapshot::decode(&bytes, &template)?)
}

/// With one seed the run writes straight into `root`; with several each
/// seed gets `root/seed<N>`.
pub fn seed_dir(root: &Path, seed: u64, n_seeds: usize) -> PathBuf {
    if n_seeds == 1 {
        root.to_path_buf()
    } else {
        root.join(format!("seed{seed}"))
    }
}

/// `train`: one run per configured seed.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<RunRecord>, ForgeError> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus, cfg.corpus_bytes, cfg.corpus_seed)?;
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let baseline = match &cfg.baseline {
            Some(b) => Some(load_checkpoint(&seed_dir(b, seed, cfg.seeds.len()), &cfg.model())?.params),
            None => None,
        };
        let output = run_in_memory(cfg, seed, corpus.clone(), baseline.as_ref())?;
        write_run(&seed_dir(out, seed, cfg.seeds.len()), cfg, seed, &output)?;
        records.push(output.record);
    }
    Ok(records)
}
