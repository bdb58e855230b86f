//! Run-versus-baseline comparison.

use std::fmt::Write as _;
use std::path::Path;

use sdc_forge_core::telemetry::parameter_difference;

use crate::config::RunConfig;
use crate::csv_io::{fmt_f32, read_records};
use crate::error::ForgeError;
use crate::run::{load_checkpoint, read_run_config, TELEMETRY_FILE};

pub const LOSS_DELTA_FILE: &str = "loss_delta.csv";

/// The fields that must agree for two runs to be comparable: everything
/// but mode, fault, detector, guard, campaign and output settings.
fn comparable(a: &RunConfig, b: &RunConfig) -> Result<(), ForgeError> {
    let checks: [(&str, bool); 8] = [
        ("seeds", a.seeds == b.seeds),
        ("steps", a.steps == b.steps),
        ("model", a.model() == b.model()),
        ("optimizer", a.optimizer() == b.optimizer()),
        ("batch_size", a.batch_size == b.batch_size),
        ("corpus", a.corpus == b.corpus && a.corpus_bytes == b.corpus_bytes && a.corpus_seed == b.corpus_seed),
        ("eval_batches", a.eval_batches == b.eval_batches),
        ("eval_every", a.eval_every == b.eval_every),
    ];
    match checks.iter().find(|c| !c.1) {
        Some((field, _)) => Err(ForgeError::Mismatch(format!("`{field}` differs"))),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub parameter_difference: f32,
    /// `(step, run loss, baseline loss, run - baseline)`.
    pub loss_delta: Vec<(u64, f32, f32, f32)>,
}

pub fn compare_dirs(run: &Path, baseline: &Path) -> Result<Comparison, ForgeError> {
    let rc = read_run_config(run)?;
    let bc = read_run_config(baseline)?;
    comparable(&rc, &bc)?;
    let model = rc.model();
    let a = load_checkpoint(run, &model)?;
    let b = load_checkpoint(baseline, &model)?;
    let diff = parameter_difference(&a.params, &b.params)?;
    let ra = read_records(&run.join(TELEMETRY_FILE))?;
    let rb = read_records(&baseline.join(TELEMETRY_FILE))?;
    let loss_delta = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| (x.step, x.train_loss, y.train_loss, x.train_loss - y.train_loss))
        .collect();
    Ok(Comparison {
        parameter_difference: diff,
        loss_delta,
    })
}

/// `compare`: write the per-step delta CSV into `out` and return the
/// comparison.
pub fn cmd_compare(run: &Path, baseline: &Path, out: &Path) -> Result<Comparison, ForgeError> {
    let c = compare_dirs(run, baseline)?;
    let mut text = String::from("step,run_loss,baseline_loss,delta\n");
    for (s, a, b, d) in &c.loss_delta {
        let _ = writeln!(text, "{s},{},{},{}", fmt_f32(*a), fmt_f32(*b), fmt_f32(*d));
    }
    std::fs::create_dir_all(out).map_err(|e| ForgeError::io(out, e))?;
    let p = out.join(LOSS_DELTA_FILE);
    std::fs::write(&p, text).map_err(|e| ForgeError::io(&p, e))?;
    Ok(c)
}
