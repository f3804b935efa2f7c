use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csmmse::cli::{self, BetaGrid, BetaUnit, Command, Grid, PriorSpec, RunConfig, Tolerances};

/// Asymptotic MMSE of noisy compressed sensing, with finite-n, random-matrix
/// and state-evolution checks. Every command writes one CSV table.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Fixed point, MMSE and baselines on an (R, beta) grid.
    Sweep(Overrides),
    /// Exact Monte-Carlo MMSE at small n against the asymptotic value.
    FiniteN(Overrides),
    /// Empirical random-matrix functionals against their deterministic equivalents.
    RmtCheck(Overrides),
    /// Asymptotic MMSE against the state-evolution reference (i.i.d. priors).
    ReplicaCompare(Overrides),
    /// Sweep R or beta and locate jumps of the selected magnetization.
    PhaseScan(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bernoulli sparsity; replaces the configured prior.
    #[arg(long)]
    p: Option<f64>,
    /// Comma-separated measurement rates.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    rates: Option<Vec<f64>>,
    /// Comma-separated SNR grid in dB (10 log10 beta).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "beta")]
    beta_db: Option<Vec<f64>>,
    /// Comma-separated SNR grid, linear.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Exit with status 1 when any row fails its tolerance.
    #[arg(long)]
    strict: bool,
}

fn config_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, o) = match cli.command {
        Sub::Sweep(o) => (Command::Sweep, o),
        Sub::FiniteN(o) => (Command::FiniteN, o),
        Sub::RmtCheck(o) => (Command::RmtCheck, o),
        Sub::ReplicaCompare(o) => (Command::ReplicaCompare, o),
        Sub::PhaseScan(o) => (Command::PhaseScan, o),
    };

    let mut config = match &o.config {
        Some(path) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => return config_error(format!("cannot read {}: {e}", path.display())),
            };
            match RunConfig::from_json(&text) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            }
        }
        None => {
            let (Some(rates), true) = (o.rates.clone(), o.beta.is_some() || o.beta_db.is_some()) else {
                return config_error("without --config, --rates and --beta or --beta-db are required");
            };
            let Some(p) = o.p else {
                return config_error("without --config, --p is required");
            };
            RunConfig {
                command: None,
                prior: PriorSpec::IidBernoulli { p },
                rates: Grid::List(rates),
                beta: BetaGrid {
                    unit: BetaUnit::Db,
                    values: Grid::List(Vec::new()),
                },
                sigma2: 1.0,
                n: None,
                trials: None,
                seed: 0,
                output: None,
                tolerances: Tolerances::default(),
                ensemble: Default::default(),
                form: Default::default(),
                rmt: Default::default(),
                scan_axis: csmmse::solver::ScanAxis::Rate,
                strict: false,
            }
        }
    };

    config.command = Some(command);
    if let Some(p) = o.p {
        config.prior = PriorSpec::IidBernoulli { p };
    }
    if let Some(r) = o.rates {
        config.rates = Grid::List(r);
    }
    if let Some(b) = o.beta_db {
        config.beta = BetaGrid {
            unit: BetaUnit::Db,
            values: Grid::List(b),
        };
    }
    if let Some(b) = o.beta {
        config.beta = BetaGrid {
            unit: BetaUnit::Linear,
            values: Grid::List(b),
        };
    }
    if let Some(s) = o.sigma2 {
        config.sigma2 = s;
    }
    config.n = o.n.or(config.n);
    config.trials = o.trials.or(config.trials);
    config.seed = o.seed.unwrap_or(config.seed);
    config.output = o.output.or(config.output);
    config.strict |= o.strict;

    let out = match cli::run(&config) {
        Ok(out) => out,
        Err(e) => return config_error(e),
    };
    match &config.output {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &out.csv) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(3);
            }
        }
        None => print!("{}", out.csv),
    }
    if out.solver_failures > 0 {
        eprintln!("{} row(s) failed to solve", out.solver_failures);
    }
    if out.tolerance_failures > 0 {
        eprintln!("{} row(s) outside tolerance", out.tolerance_failures);
    }
    ExitCode::from(out.exit_code(config.strict))
}
