//! Thin CLI over the library. Exit codes: 0 success, 2 bad configuration,
//! 3 runtime failure (including failed verification), 4 benchmark finished
//! with failed cells.

use clap::{Args, Parser, Subcommand};
use covft_lab::comoe::Routing;
use covft_lab::experiment::{self, ExperimentConfig, MatrixKind};
use covft_lab::verify;
use covft_lab::vft::Strategy;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "covft-lab",
    version,
    about = "Desk-scale lab for context-aware visual fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand. Precedence: flag, then config file,
/// then the COVFT_LAB_OUT environment variable (output root only), then
/// built-in defaults.
#[derive(Args)]
struct Common {
    /// Config file of flat `key = value` lines (see `ExperimentConfig`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for data, init, and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the instruction data to keep, in (0, 1].
    #[arg(long)]
    data_fraction: Option<f64>,
    /// freeze | full_ft | bitfit | lora | vpt | covft.
    #[arg(long)]
    strategy: Option<String>,
    /// dense | sparse_K | uniform | random_K.
    #[arg(long)]
    routing: Option<String>,
    /// Experts per mixture block.
    #[arg(long)]
    experts: Option<usize>,
    /// First encoder block hosting a mixture.
    #[arg(long)]
    comoe_start: Option<usize>,
    /// Last encoder block hosting a mixture.
    #[arg(long)]
    comoe_end: Option<usize>,
    /// Output root for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for benchmark cells.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-stage training of one strategy; writes a run directory.
    Train(Common),
    /// A benchmark matrix of configuration-aligned runs.
    Bench {
        #[command(flatten)]
        common: Common,
        /// strategy | routing | contextual | experts | diversity.
        #[arg(long, default_value = "strategy")]
        matrix: String,
        /// Consecutive seeds per cell, starting at the root seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Twin-run divergence plus gradient-alignment diagnostics.
    Conflict {
        #[command(flatten)]
        common: Common,
        /// Consecutive seeds, starting at the root seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Cluster and correlate the context traces of a finished run.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Run directory containing traces.json.
        #[arg(long)]
        run: PathBuf,
    },
    /// The release checklist: every check, one line each. Budgets are fixed
    /// by the suite; only seed, output root, and jobs are read from flags.
    Verify(Common),
}

fn build_config(c: &Common) -> covft_lab::Result<ExperimentConfig> {
    let mut xc = ExperimentConfig::default();
    if let Ok(out) = std::env::var("COVFT_LAB_OUT") {
        if !out.is_empty() {
            xc.out = PathBuf::from(out);
        }
    }
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| covft_lab::Error::io(path, e))?;
        xc.apply_text(&text)?;
    }
    if let Some(v) = c.seed {
        xc.seed = v;
    }
    if let Some(v) = c.data_fraction {
        xc.data.fraction = v;
    }
    if let Some(v) = &c.strategy {
        xc.strategy = Strategy::from_name(v)?;
    }
    if let Some(v) = &c.routing {
        xc.knobs.routing = Routing::from_name(v)?;
    }
    if let Some(v) = c.experts {
        xc.knobs.experts = v;
    }
    if let Some(v) = c.comoe_start {
        xc.knobs.comoe_start = v;
    }
    if let Some(v) = c.comoe_end {
        xc.knobs.comoe_end = v;
    }
    if let Some(v) = &c.out {
        xc.out = v.clone();
    }
    if let Some(v) = c.jobs {
        xc.jobs = v;
    }
    xc.validate()?;
    Ok(xc)
}

fn run(cli: Cli) -> covft_lab::Result<ExitCode> {
    match cli.cmd {
        Cmd::Train(c) => {
            let xc = build_config(&c)?;
            let s = experiment::cmd_train(&xc)?;
            println!("{} → {} (macro {:.4})", s.run_id, s.dir.display(), s.macro_mean);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench { common, matrix, seeds } => {
            let xc = build_config(&common)?;
            let matrix = MatrixKind::from_name(&matrix)?;
            let out = experiment::cmd_bench(&xc, matrix, seeds)?;
            print!("{}", out.table);
            eprintln!("table → {}", out.dir.join("table.csv").display());
            if out.failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                for f in &out.failed {
                    eprintln!("failed cell: {f}");
                }
                Ok(ExitCode::from(4))
            }
        }
        Cmd::Conflict { common, seeds } => {
            let xc = build_config(&common)?;
            let (dir, bundle) = experiment::cmd_conflict(&xc, seeds)?;
            for d in &bundle.divergence {
                println!(
                    "seed {}: divergence ρ={:.3}, deep {:.4} vs shallow {:.4}",
                    d.seed, d.spearman, d.deep_mean, d.shallow_mean
                );
            }
            for a in &bundle.alignment {
                println!(
                    "seed {}: alignment mean covft {:.3} vs full_ft {:.3} (std {:.3} vs {:.3})",
                    a.seed, a.covft.mean, a.full_ft.mean, a.covft.std, a.full_ft.std
                );
            }
            eprintln!("bundle → {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Analyze { common, run } => {
            let xc = build_config(&common)?;
            let (dir, rep) = experiment::cmd_analyze(&run, xc.analysis_k, xc.seed)?;
            println!(
                "k={} over {} traces: visual lift {:+.4}, textual lift {:+.4}, routing r {:.3} (null {:+.3})",
                rep.k, rep.n, rep.visual_lift, rep.textual_lift, rep.routing_r, rep.shuffle_r
            );
            eprintln!("reports → {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify(c) => {
            let xc = build_config(&c)?;
            let report = verify::run_all(&xc, |check| println!("{}", check.line()))?;
            let passed = report.checks.iter().filter(|c| c.passed).count();
            println!("{passed}/{} checks passed", report.checks.len());
            if report.all_passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
