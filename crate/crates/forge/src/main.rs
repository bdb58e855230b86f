use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdc_forge::campaign::{cmd_campaign, cmd_report, CampaignOptions};
use sdc_forge::compare::cmd_compare;
use sdc_forge::csv_io::fmt_f32;
use sdc_forge::run::cmd_train;
use sdc_forge::{ForgeError, RunConfig, RunMode};

#[derive(Parser)]
#[command(name = "sdc-forge", version, about = "Bit-flip fault injection for bf16 transformer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["baseline", "fault", "guarded"]))]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(Common),
    /// Run a grid of cells and write the aggregate report.
    Campaign {
        #[command(flatten)]
        common: Common,
        /// Skip cells that already have a summary.
        #[arg(long)]
        resume: bool,
    },
    /// Parameter difference and per-step loss deltas of a run against a baseline.
    Compare {
        run: PathBuf,
        baseline: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild the CSV report of a campaign directory.
    Report { dir: PathBuf },
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf), ForgeError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse::<RunMode>().expect("restricted by clap");
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), ForgeError> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            for r in cmd_train(&cfg, &out)? {
                let diff = r.parameter_difference.map_or("-".into(), |d| fmt_f32(d.0));
                println!(
                    "seed {}: eval_loss {} max_grad_norm_pre {} detections {} parameter_difference {diff}",
                    r.seed,
                    fmt_f32(r.final_eval_loss.0),
                    fmt_f32(r.max_grad_norm_pre.0),
                    r.detection.detections,
                );
            }
        }
        Command::Campaign { common, resume } => {
            let (cfg, out) = load(&common)?;
            let report = cmd_campaign(&cfg, &out, CampaignOptions::from_env(resume))?;
            let failed = report.cells.iter().filter(|c| c.status != "ok").count();
            println!(
                "{} cells ({failed} failed), precision {}, detection rate {}; report in {}",
                report.cells.len(),
                fmt_f32(report.precision.0),
                fmt_f32(report.detection_rate.0),
                out.display()
            );
        }
        Command::Compare { run, baseline, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let c = cmd_compare(&run, &baseline, &out)?;
            println!("parameter_difference {}", fmt_f32(c.parameter_difference));
        }
        Command::Report { dir } => {
            let r = cmd_report(&dir)?;
            println!("{} groups written to {}", r.groups.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
