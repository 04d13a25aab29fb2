use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamfed::experiment::{run_tuning, BoundsConfig, ExperimentConfig};
use streamfed::{run_adversarial_check, run_bound_exploration, run_experiment, verify, Error, Exec};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_ASSERTION: u8 = 4;

#[derive(Parser)]
#[command(name = "streamfed", version, about = "Federated learning over client data streams")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every strategy on every seed and write metrics and a summary.
    Run { config: PathBuf },
    /// Sweep the bound-optimal allocation over c2/c1 and write curves.csv.
    Bounds { config: PathBuf },
    /// Check the optimization-error lower bound on the two-point instance.
    Adversarial {
        /// Even horizons; the verdict uses the largest.
        #[arg(long = "T", value_delimiter = ',', default_value = "1000,10000")]
        horizons: Vec<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Pick the learning rate per strategy on the validation split.
    Tune { config: PathBuf },
    /// Recompute a run directory's summary from its CSV files.
    Verify { run_dir: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Round { source, .. } => exit_code(source),
        Error::Config { .. }
        | Error::InvalidInput(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::StreamExhausted { .. }
        | Error::CapacityExceeded { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERIC,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("STREAMFED_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("STREAMFED_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn fmt_stat(s: Option<&streamfed::experiment::Stat>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.ci_half_width),
        None => "-".into(),
    }
}

fn execute(cli: Cli) -> Result<u8, Error> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_experiment(&cfg, exec)?;
            let s = &out.summary;
            println!("{:<14} {:>10} {:>20} {:>20} {:>14}", "strategy", "eta", "test_acc", "test_loss", "sigma_hat_sq");
            for (label, row) in &s.strategies {
                println!(
                    "{:<14} {:>10.3e} {:>20} {:>20} {:>14.6}",
                    label,
                    row.eta,
                    fmt_stat(row.test_acc.as_ref()),
                    fmt_stat(Some(&row.test_loss)),
                    row.sigma_hat_sq.mean
                );
            }
            if let (Some(r), Some(p)) = (&s.c_ratio, &s.p_hist_star) {
                println!("c2/c1 = {}  p*_hist = {}", fmt_stat(Some(r)), fmt_stat(Some(p)));
            }
            if let Some(o) = &s.optimal {
                println!("optimal p_hist = {} ({})", o.p_hist, fmt_stat(o.test_acc.as_ref()));
            }
            println!("wrote {}", cfg.output_dir.display());
            Ok(0)
        }
        Command::Bounds { config } => {
            let cfg = BoundsConfig::load(&config)?;
            let rows = run_bound_exploration(&cfg, exec)?;
            println!("wrote {} rows to {}", rows.len(), cfg.output_dir.join("curves.csv").display());
            Ok(0)
        }
        Command::Adversarial { horizons, output } => {
            let report = run_adversarial_check(&horizons, exec)?;
            println!(
                "{:>8} {:>6} {:>10} {:>12} {:>12} {:>12} {:>12} {:>10} {:>8}",
                "T", "q", "theta1*", "eps_opt", "sigma_sq", "probe_max", "threshold", "line_gap", "result"
            );
            for r in &report.rows {
                println!(
                    "{:>8} {:>6.3} {:>10.5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>10.5} {:>8}",
                    r.rounds,
                    r.q,
                    r.theta1_star,
                    r.eps_opt,
                    r.sigma_hat_sq,
                    r.sigma_hat_sq_probe,
                    r.threshold,
                    r.line_gap,
                    if r.passed { "pass" } else { "fail" }
                );
            }
            if let Some(path) = output {
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            if report.passed() {
                Ok(0)
            } else {
                let last = report.rows.iter().max_by_key(|r| r.rounds).expect("non-empty report");
                eprintln!(
                    "lower bound not met at T={}: eps_opt = {:.6} < (3/20)*sigma_hat_sq = {:.6}",
                    last.rounds, last.eps_opt, last.threshold
                );
                Ok(EXIT_ASSERTION)
            }
        }
        Command::Tune { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = run_tuning(&cfg, exec)?;
            for (label, eta) in &out.selected {
                println!("{label:<14} eta = {eta:.4e}");
            }
            Ok(0)
        }
        Command::Verify { run_dir } => {
            let report = verify(&run_dir)?;
            let mut failed = 0;
            for c in &report.checks {
                if !c.ok {
                    failed += 1;
                    println!("FAIL {}: {}", c.name, c.detail);
                }
            }
            println!("{} checks, {} failed", report.checks.len(), failed);
            Ok(if report.ok() { 0 } else { EXIT_ASSERTION })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
