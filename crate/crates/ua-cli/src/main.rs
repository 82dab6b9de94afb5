//! Command-line driver: `ua <converge|invariants|poincare|defect>` with a
//! flat key = value config file plus flag overrides. Exit code 0 on full
//! success, 2 when individual sweep cells failed (the run continues), 1 on
//! configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ua_cli::config::ExperimentConfig;
use ua_cli::runner;

#[derive(Parser)]
#[command(name = "ua", about = "Uniformly accurate integrators for highly oscillatory problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Error-vs-dt sweep over an epsilon ladder, against a reference solution
    Converge(CommonArgs),
    /// Long-time invariant monitoring (H for hh; Q and E for kg)
    Invariants(CommonArgs),
    /// Poincare cuts of Henon-Heiles orbits on q1 = 0
    Poincare(CommonArgs),
    /// Averaging-defect decay ladder
    Defect(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// comma-separated epsilon ladder (problem units)
    #[arg(long)]
    eps: Option<String>,
    /// comma-separated step sizes
    #[arg(long)]
    dt: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long, value_name = "T")]
    t_end: Option<f64>,
    /// output CSV path (plot script lands next to it)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// run the paper-scale horizons instead of the desk-scale defaults
    #[arg(long)]
    full_scale: bool,
}

fn build_config(args: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &args.problem {
        cfg.set("problem", v)?;
    }
    if let Some(v) = &args.method {
        cfg.set("method", v)?;
    }
    if let Some(v) = &args.scheme {
        cfg.set("scheme", v)?;
    }
    if let Some(v) = &args.eps {
        cfg.set("eps", v)?;
    }
    if let Some(v) = &args.dt {
        cfg.set("dt", v)?;
    }
    if let Some(v) = args.t_end {
        cfg.set("t_end", &v.to_string())?;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.workers {
        cfg.set("workers", &v.to_string())?;
    }
    if args.full_scale {
        cfg.set("full_scale", "true")?;
        // paper-scale horizons unless the config pinned one explicitly
        match (cfg.problem, cfg.t_end) {
            (ua_cli::config::Problem::HenonHeiles, t) if t <= 3000.0 => cfg.t_end = 30000.0,
            (ua_cli::config::Problem::KleinGordon, t) if t <= 100.0 => cfg.t_end = 1000.0,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, run): (&CommonArgs, fn(&ExperimentConfig) -> anyhow::Result<bool>) =
        match &cli.command {
            Command::Converge(a) => (a, run_converge),
            Command::Invariants(a) => (a, run_invariants),
            Command::Poincare(a) => (a, run_poincare),
            Command::Defect(a) => (a, run_defect),
        };
    let cfg = match build_config(args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("completed with failed cells (see status column)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run_converge(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let result = runner::run_convergence(cfg)?;
    runner::write_convergence(&cfg.out, &result)?;
    for (eps, slope) in &result.slopes {
        println!("eps = {eps}: fitted slope {slope:.3}");
    }
    println!(
        "{} rows -> {} (+ _slopes, _maxcurve, .gp)",
        result.rows.len(),
        cfg.out.display()
    );
    Ok(!result.any_failed)
}

fn run_invariants(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let result = runner::run_invariants(cfg)?;
    runner::write_invariants(&cfg.out, &result)?;
    for s in &result.series {
        println!(
            "{}: max relative error {:.3e}, trend {:.3e} +- {:.3e} per unit time",
            s.name, s.max_rel_error, s.trend, s.trend_se
        );
    }
    Ok(true)
}

fn run_poincare(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let result = runner::run_poincare(cfg)?;
    runner::write_poincare(&cfg.out, &result)?;
    println!(
        "{} cuts, H target {}, max |H - H*| at cuts {:.3e} (trajectory {:.3e})",
        result.cuts.len(),
        result.h_target,
        result.max_h_error_cuts,
        result.max_h_error_traj
    );
    Ok(true)
}

fn run_defect(cfg: &ExperimentConfig) -> anyhow::Result<bool> {
    let result = runner::run_defect(cfg)?;
    runner::write_defect(&cfg.out, &result)?;
    for (order, eps, ratio) in &result.ratios {
        println!("order {order}, eps {eps}: log2 ratio {ratio:.3}");
    }
    Ok(true)
}
