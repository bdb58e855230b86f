//! Campaign grids: cartesian expansion, a per-seed baseline, parallel cells
//! on a small thread pool, resume and the aggregate report.
//!
//! Layout under the output directory:
//!
//! ```text
//! campaign.toml              the template config
//! baseline/seed<N>/          fault-free reference runs
//! cells/<cell id>/           one run per cell
//! report.json, cells.csv, groups.csv
//! ```
//!
//! The report is always rebuilt from the summaries on disk, so a resumed
//! campaign reports exactly what an uninterrupted one would.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sdc_forge_core::model::ParameterSet;

use crate::config::{RunConfig, RunMode, ScheduleKind};
use crate::corpus::load_corpus;
use crate::csv_io::fmt_f32;
use crate::error::ForgeError;
use crate::run::{load_checkpoint, read_summary, run_in_memory, write_run, Num, RunRecord, SUMMARY_FILE};

pub const CAMPAIGN_CONFIG: &str = "campaign.toml";
pub const REPORT_JSON: &str = "report.json";
pub const CELLS_CSV: &str = "cells.csv";
pub const GROUPS_CSV: &str = "groups.csv";
const ERROR_FILE: &str = "error.txt";

/// Axis values of one cell; `None` where the grid has no such axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    pub mode: RunMode,
    pub site: Option<String>,
    pub bit: Option<u8>,
    pub one_in: Option<u64>,
    pub duration: Option<u64>,
    pub alpha: Option<f32>,
}

impl Coordinates {
    /// Directory-safe key, shared by all seeds of the cell.
    pub fn key(&self) -> String {
        let mut k = self.mode.as_str().to_string();
        if let Some(s) = &self.site {
            let clean: String = s
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            let _ = write!(k, "_site-{clean}");
        }
        if let Some(b) = self.bit {
            let _ = write!(k, "_bit-{b}");
        }
        if let Some(r) = self.one_in {
            let _ = write!(k, "_rate-{r}");
        }
        if let Some(d) = self.duration {
            let _ = write!(k, "_dur-{d}");
        }
        if let Some(a) = self.alpha {
            let _ = write!(k, "_alpha-{a}");
        }
        k
    }
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub coords: Coordinates,
    pub seed: u64,
    pub config: RunConfig,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}_seed-{}", self.coords.key(), self.seed)
    }
}

fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

/// Deterministic cartesian expansion: modes, sites, bits, rates,
/// durations, alphas, then seeds, the last varying fastest.
pub fn expand(grid: &RunConfig) -> Vec<Cell> {
    let modes = if grid.grid_modes.is_empty() { vec![grid.mode] } else { grid.grid_modes.clone() };
    let mut cells = Vec::new();
    for &mode in &modes {
        for site in axis(&grid.grid_sites) {
            for bit in axis(&grid.grid_bits) {
                for one_in in axis(&grid.grid_rates) {
                    for duration in axis(&grid.grid_durations) {
                        for alpha in axis(&grid.grid_alphas) {
                            for &seed in &grid.seeds {
                                let mut c = grid.clone();
                                c.mode = mode;
                                c.seeds = vec![seed];
                                c.baseline = None;
                                c.grid_modes.clear();
                                c.grid_sites.clear();
                                c.grid_bits.clear();
                                c.grid_rates.clear();
                                c.grid_durations.clear();
                                c.grid_alphas.clear();
                                if let Some(s) = &site {
                                    c.fault_sites = vec![s.clone()];
                                }
                                if let Some(b) = bit {
                                    c.fault_mask = 0;
                                    c.fault_bits = vec![b];
                                }
                                if let Some(r) = one_in {
                                    c.fault_one_in = r;
                                }
                                if let Some(d) = duration {
                                    c.fault_duration = d;
                                    if c.fault_schedule == ScheduleKind::RateRandomDuration {
                                        c.fault_dur_min = d;
                                        c.fault_dur_max = d;
                                    }
                                }
                                if let Some(a) = alpha {
                                    c.alpha = a;
                                }
                                cells.push(Cell {
                                    coords: Coordinates {
                                        mode,
                                        site: site.clone(),
                                        bit,
                                        one_in,
                                        duration,
                                        alpha,
                                    },
                                    seed,
                                    config: c,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    cells
}

/// The fault-free reference for `seed`.
pub fn baseline_config(grid: &RunConfig, seed: u64) -> RunConfig {
    let mut c = expand(grid).swap_remove(0).config;
    c.mode = RunMode::Baseline;
    c.seeds = vec![seed];
    c
}

pub fn baseline_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("baseline").join(format!("seed{seed}"))
}

pub fn cell_dir(root: &Path, cell: &Cell) -> PathBuf {
    root.join("cells").join(cell.id())
}

#[derive(Clone, Copy, Debug)]
pub struct CampaignOptions {
    /// Skip runs whose summary already exists.
    pub resume: bool,
    pub threads: usize,
}

impl CampaignOptions {
    /// `SDC_FORGE_THREADS` if set, else the machine's parallelism.
    pub fn from_env(resume: bool) -> Self {
        let threads = std::env::var("SDC_FORGE_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        CampaignOptions { resume, threads }
    }
}

/// Run `jobs` on up to `threads` workers. Each job owns its output, so the
/// order of completion does not matter.
fn pool<J: Sync>(jobs: &[J], threads: usize, work: impl Fn(&J) + Sync) {
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                match jobs.get(i) {
                    Some(j) => work(j),
                    None => break,
                }
            });
        }
    });
}

fn record_failure(dir: &Path, err: &ForgeError) {
    let _ = std::fs::create_dir_all(dir);
    let _ = std::fs::write(dir.join(ERROR_FILE), format!("{err}\n"));
}

fn done(dir: &Path, resume: bool) -> bool {
    resume && dir.join(SUMMARY_FILE).is_file()
}

/// `campaign`: execute every cell, then write the report.
pub fn cmd_campaign(grid: &RunConfig, out: &Path, opts: CampaignOptions) -> Result<CampaignReport, ForgeError> {
    grid.validate()?;
    let cells = expand(grid);
    for c in &cells {
        c.config.validate()?;
    }
    std::fs::create_dir_all(out).map_err(|e| ForgeError::io(out, e))?;
    let cfg_path = out.join(CAMPAIGN_CONFIG);
    std::fs::write(&cfg_path, grid.to_toml_string()).map_err(|e| ForgeError::io(&cfg_path, e))?;
    let corpus = load_corpus(&grid.corpus, grid.corpus_bytes, grid.corpus_seed)?;

    let needs_baseline = cells.iter().any(|c| c.coords.mode != RunMode::Baseline);
    if needs_baseline {
        let seeds: Vec<u64> = grid.seeds.clone();
        pool(&seeds, opts.threads, |&seed| {
            let dir = baseline_dir(out, seed);
            if done(&dir, opts.resume) {
                return;
            }
            let cfg = baseline_config(grid, seed);
            let res = run_in_memory(&cfg, seed, corpus.clone(), None).and_then(|o| write_run(&dir, &cfg, seed, &o));
            if let Err(e) = res {
                record_failure(&dir, &e);
            }
        });
    }

    pool(&cells, opts.threads, |cell| {
        let dir = cell_dir(out, cell);
        if done(&dir, opts.resume) {
            return;
        }
        let _ = std::fs::remove_file(dir.join(ERROR_FILE));
        let res = run_cell(cell, out, corpus.clone(), needs_baseline);
        if let Err(e) = res {
            record_failure(&dir, &e);
        }
    });

    let report = build_report(grid, out)?;
    write_report(out, &report)?;
    Ok(report)
}

fn run_cell(cell: &Cell, out: &Path, corpus: Arc<[u8]>, with_baseline: bool) -> Result<(), ForgeError> {
    let baseline: Option<ParameterSet> = if with_baseline {
        Some(load_checkpoint(&baseline_dir(out, cell.seed), &cell.config.model())?.params)
    } else {
        None
    };
    let output = run_in_memory(&cell.config, cell.seed, corpus, baseline.as_ref())?;
    write_run(&cell_dir(out, cell), &cell.config, cell.seed, &output)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub id: String,
    pub key: String,
    pub seed: u64,
    /// `ok`, `missing`, or the error message of a failed run.
    pub status: String,
    pub summary: Option<RunRecord>,
}

/// Aggregate over the seeds of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub key: String,
    pub coords: Coordinates,
    pub runs: usize,
    pub failed: usize,
    /// Mean and sample standard deviation of final eval loss; NaN if any
    /// run ended non-finite.
    pub eval_mean: Num,
    pub eval_std: Num,
    pub non_finite_runs: usize,
    pub max_grad_norm_pre: Num,
    pub max_attn_logit: Num,
    pub parameter_difference_mean: Num,
    pub detections: u64,
    pub justified: u64,
    /// Justified over total detections; NaN without detections.
    pub precision: Num,
    pub fault_events: u64,
    pub events_detected: u64,
    /// Detected over injected events; NaN without events.
    pub detection_rate: Num,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub baseline_eval_mean: Num,
    pub baseline_eval_std: Num,
    pub baseline: Vec<CellResult>,
    pub cells: Vec<CellResult>,
    pub groups: Vec<GroupStats>,
    pub precision: Num,
    pub detection_rate: Num,
}

impl CampaignReport {
    pub fn group(&self, key: &str) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.key == key)
    }
}

pub fn mean_std(xs: &[f32]) -> (f32, f32) {
    if xs.is_empty() {
        return (f32::NAN, f32::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean as f32, 0.0);
    }
    let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean as f32, var.sqrt() as f32)
}

fn ratio(num: u64, den: u64) -> f32 {
    if den == 0 { f32::NAN } else { num as f32 / den as f32 }
}

fn load_result(dir: &Path, id: String, key: String, seed: u64) -> CellResult {
    let (status, summary) = match read_summary(dir) {
        Ok(s) => ("ok".to_string(), Some(s)),
        Err(_) => match std::fs::read_to_string(dir.join(ERROR_FILE)) {
            Ok(msg) => (msg.trim().to_string(), None),
            Err(_) => ("missing".to_string(), None),
        },
    };
    CellResult { id, key, seed, status, summary }
}

fn aggregate(key: String, coords: Coordinates, results: &[&CellResult]) -> GroupStats {
    let ok: Vec<&RunRecord> = results.iter().filter_map(|r| r.summary.as_ref()).collect();
    let evals: Vec<f32> = ok.iter().map(|s| s.final_eval_loss.0).collect();
    let (eval_mean, eval_std) = mean_std(&evals);
    let max_of = |f: fn(&RunRecord) -> f32| sdc_forge_core::telemetry::max_ignoring_nan(ok.iter().map(|s| f(s)));
    let diffs: Vec<f32> = ok.iter().filter_map(|s| s.parameter_difference.map(|d| d.0)).collect();
    let sum = |f: fn(&RunRecord) -> u64| ok.iter().map(|s| f(s)).sum::<u64>();
    let detections = sum(|s| s.detection.detections);
    let justified = sum(|s| s.detection.justified);
    let fault_events = sum(|s| s.detection.fault_events);
    let events_detected = sum(|s| s.detection.events_detected);
    GroupStats {
        key,
        coords,
        runs: ok.len(),
        failed: results.len() - ok.len(),
        eval_mean: Num(eval_mean),
        eval_std: Num(eval_std),
        non_finite_runs: evals.iter().filter(|e| !e.is_finite()).count(),
        max_grad_norm_pre: Num(max_of(|s| s.max_grad_norm_pre.0)),
        max_attn_logit: Num(max_of(|s| s.max_attn_logit.0)),
        parameter_difference_mean: Num(mean_std(&diffs).0),
        detections,
        justified,
        precision: Num(ratio(justified, detections)),
        fault_events,
        events_detected,
        detection_rate: Num(ratio(events_detected, fault_events)),
    }
}

/// Read every summary under `out` and aggregate.
pub fn build_report(grid: &RunConfig, out: &Path) -> Result<CampaignReport, ForgeError> {
    let cells = expand(grid);
    let results: Vec<CellResult> = cells
        .iter()
        .map(|c| load_result(&cell_dir(out, c), c.id(), c.coords.key(), c.seed))
        .collect();
    let baseline: Vec<CellResult> = if cells.iter().any(|c| c.coords.mode != RunMode::Baseline) {
        grid.seeds
            .iter()
            .map(|&s| load_result(&baseline_dir(out, s), format!("baseline_seed-{s}"), "baseline".into(), s))
            .collect()
    } else {
        Vec::new()
    };
    let base_evals: Vec<f32> = baseline
        .iter()
        .filter_map(|r| r.summary.as_ref().map(|s| s.final_eval_loss.0))
        .collect();
    let (bm, bs) = mean_std(&base_evals);

    let mut groups = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let key = c.coords.key();
        if groups.iter().any(|g: &GroupStats| g.key == key) {
            continue;
        }
        let members: Vec<&CellResult> = results[i..].iter().filter(|r| r.key == key).collect();
        groups.push(aggregate(key, c.coords.clone(), &members));
    }
    let detections: u64 = groups.iter().map(|g| g.detections).sum();
    let justified: u64 = groups.iter().map(|g| g.justified).sum();
    let events: u64 = groups.iter().map(|g| g.fault_events).sum();
    let detected: u64 = groups.iter().map(|g| g.events_detected).sum();
    Ok(CampaignReport {
        baseline_eval_mean: Num(bm),
        baseline_eval_std: Num(bs),
        baseline,
        cells: results,
        groups,
        precision: Num(ratio(justified, detections)),
        detection_rate: Num(ratio(detected, events)),
    })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), |x| x.to_string())
}

/// `report.json` plus plot-ready `cells.csv` and `groups.csv`.
pub fn write_report(out: &Path, report: &CampaignReport) -> Result<(), ForgeError> {
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| ForgeError::io(&p, e))
    };
    write(REPORT_JSON, serde_json::to_string_pretty(report).expect("report serializes") + "\n")?;

    let mut cells = String::from(
        "id,key,seed,status,final_eval_loss,max_grad_norm_pre,max_attn_logit,parameter_difference,detections,justified,fault_events,events_detected\n",
    );
    for c in report.baseline.iter().chain(&report.cells) {
        let status = if c.status == "ok" || c.status == "missing" { c.status.as_str() } else { "failed" };
        let _ = write!(cells, "{},{},{},{status}", c.id, c.key, c.seed);
        match &c.summary {
            Some(s) => {
                let _ = writeln!(
                    cells,
                    ",{},{},{},{},{},{},{},{}",
                    fmt_f32(s.final_eval_loss.0),
                    fmt_f32(s.max_grad_norm_pre.0),
                    fmt_f32(s.max_attn_logit.0),
                    s.parameter_difference.map_or(String::new(), |d| fmt_f32(d.0)),
                    s.detection.detections,
                    s.detection.justified,
                    s.detection.fault_events,
                    s.detection.events_detected,
                );
            }
            None => cells.push_str(",,,,,,,,\n"),
        }
    }
    write(CELLS_CSV, cells)?;

    let mut groups = String::from(
        "key,mode,site,bit,one_in,duration,alpha,runs,failed,eval_mean,eval_std,non_finite_runs,max_grad_norm_pre,max_attn_logit,parameter_difference_mean,precision,detection_rate\n",
    );
    for g in &report.groups {
        let c = &g.coords;
        let _ = writeln!(
            groups,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            g.key,
            c.mode.as_str(),
            opt(&c.site),
            opt(&c.bit),
            opt(&c.one_in),
            opt(&c.duration),
            opt(&c.alpha),
            g.runs,
            g.failed,
            fmt_f32(g.eval_mean.0),
            fmt_f32(g.eval_std.0),
            g.non_finite_runs,
            fmt_f32(g.max_grad_norm_pre.0),
            fmt_f32(g.max_attn_logit.0),
            fmt_f32(g.parameter_difference_mean.0),
            fmt_f32(g.precision.0),
            fmt_f32(g.detection_rate.0),
        );
    }
    write(GROUPS_CSV, groups)
}

/// `report`: rebuild the report of an existing campaign directory.
pub fn cmd_report(out: &Path) -> Result<CampaignReport, ForgeError> {
    let grid = RunConfig::load(&out.join(CAMPAIGN_CONFIG))?;
    let report = build_report(&grid, out)?;
    write_report(out, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_is_cartesian_and_ordered() {
        let g = RunConfig::from_toml_str(
            "mode = \"fault\"\nseeds = [0, 1]\ngrid_bits = [0, 14]\ngrid_sites = [\"BP3\", \"FP:l0.q_proj\"]\ngrid_alphas = [0.1]",
        )
        .unwrap();
        let cells = expand(&g);
        assert_eq!(cells.len(), 2 * 2 * 2);
        assert_eq!(cells[0].id(), "fault_site-BP3_bit-0_alpha-0.1_seed-0");
        assert_eq!(cells[1].seed, 1);
        assert_eq!(cells[2].config.fault_bits, vec![14]);
        assert_eq!(cells[7].coords.key(), "fault_site-FP_l0.q_proj_bit-14_alpha-0.1");
        assert!(cells.iter().all(|c| c.config.grid_bits.is_empty() && c.config.seeds.len() == 1));
        assert_eq!(expand(&g).iter().map(Cell::id).collect::<Vec<_>>(), cells.iter().map(Cell::id).collect::<Vec<_>>());
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, std::f32::consts::SQRT_2));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
        assert!(mean_std(&[1.0, f32::NAN]).0.is_nan());
    }
}
