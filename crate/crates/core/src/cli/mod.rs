//! Drivers behind the `csmmse` binary: each command turns a [`RunConfig`]
//! into one CSV table with a fixed column order.
//!
//! Numbers are written with a decimal point and full round-trip precision,
//! switching to scientific notation when `|v| < 1e-4` or `|v| > 1e6`.
//! Cells run in parallel but rows always come out in grid order, so a rerun
//! with the same config is byte-identical.

pub mod config;

use rayon::prelude::*;

use crate::exact::{mc_mmse, McOptions};
use crate::model::{ModelParams, SparsityPrior};
use crate::oracle::oracle_e;
use crate::replica::replica_mmse;
use crate::rmt::{rmt_report, RmtCheck};
use crate::scalar::ScalarContext;
use crate::solver::{phase_scan, solve_mmse, ScanAxis, SolverConfig};

pub use config::{BetaGrid, BetaUnit, Command, ConfigError, Grid, PriorSpec, RmtSettings, RunConfig, Tolerances};

pub const SWEEP_COLUMNS: &[&str] = &[
    "R",
    "beta",
    "sigma2",
    "prior_kind",
    "prior_params",
    "m_a",
    "m_star",
    "gamma_star",
    "rho1",
    "rho2",
    "rho3",
    "free_energy",
    "D",
    "noise_sensitivity",
    "oracle_E",
    "D_replica",
    "degenerate_flag",
    "n_solutions",
    "error",
];

pub const FINITE_N_COLUMNS: &[&str] = &[
    "R",
    "beta",
    "sigma2",
    "prior_kind",
    "prior_params",
    "n",
    "trials",
    "seed",
    "mc_mmse",
    "std_error",
    "direct_mmse",
    "direct_std_error",
    "D",
    "gap",
    "band",
    "pass",
    "error",
];

pub const RMT_COLUMNS: &[&str] = &[
    "R",
    "beta",
    "sigma2",
    "n",
    "k",
    "m_s",
    "m_r",
    "m_sr",
    "seed",
    "check",
    "empirical",
    "equivalent",
    "gap",
    "scaled_gap",
    "pass",
    "error",
];

pub const REPLICA_COLUMNS: &[&str] = &[
    "R",
    "beta",
    "sigma2",
    "p",
    "m_star",
    "D",
    "D_replica",
    "tau2",
    "n_branches",
    "relative_gap",
    "pass",
    "error",
];

pub const PHASE_COLUMNS: &[&str] = &[
    "row_kind",
    "axis",
    "value",
    "R",
    "beta",
    "sigma2",
    "m_star",
    "gamma_star",
    "free_energy",
    "D",
    "noise_sensitivity",
    "n_solutions",
    "degenerate_flag",
    "runner_up_m",
    "runner_up_free_energy",
    "error",
];

/// Locale-free number formatting used in every CSV cell.
pub fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let a = v.abs();
    if !(1e-4..=1e6).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn fmt_bool(b: bool) -> String {
    if b { "true" } else { "false" }.into()
}

/// CSV text plus failure counts for exit-code selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub csv: String,
    pub rows: usize,
    /// Rows whose `pass` column is false.
    pub tolerance_failures: usize,
    /// Rows carrying a solver or sampler error.
    pub solver_failures: usize,
}

impl RunOutput {
    /// 0 success, 1 tolerance failure under `strict`, 3 solver failure.
    pub fn exit_code(&self, strict: bool) -> u8 {
        if self.solver_failures > 0 {
            3
        } else if strict && self.tolerance_failures > 0 {
            1
        } else {
            0
        }
    }
}

struct Table {
    rows: Vec<Vec<String>>,
    columns: &'static [&'static str],
    tolerance_failures: usize,
    solver_failures: usize,
}

impl Table {
    fn new(columns: &'static [&'static str]) -> Self {
        Table {
            rows: Vec::new(),
            columns,
            tolerance_failures: 0,
            solver_failures: 0,
        }
    }

    fn push(&mut self, row: Row) {
        debug_assert_eq!(row.cells.len(), self.columns.len());
        if row.failed {
            self.tolerance_failures += 1;
        }
        if row.error {
            self.solver_failures += 1;
        }
        self.rows.push(row.cells);
    }

    fn finish(self) -> RunOutput {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        let bytes = w.into_inner().expect("in-memory flush");
        RunOutput {
            csv: String::from_utf8(bytes).expect("utf-8 cells"),
            rows: self.rows.len(),
            tolerance_failures: self.tolerance_failures,
            solver_failures: self.solver_failures,
        }
    }
}

struct Row {
    cells: Vec<String>,
    failed: bool,
    error: bool,
}

impl Row {
    fn ok(cells: Vec<String>, pass: bool) -> Self {
        Row {
            cells,
            failed: !pass,
            error: false,
        }
    }

    /// Leading cells kept, the rest blank except the trailing error message.
    fn error(mut lead: Vec<String>, width: usize, err: &crate::Error) -> Self {
        lead.resize(width - 1, String::new());
        lead.push(err.to_string());
        Row {
            cells: lead,
            failed: false,
            error: true,
        }
    }
}

fn lead(p: &ModelParams) -> Vec<String> {
    vec![fmt_num(p.rate), fmt_num(p.beta), fmt_num(p.sigma2)]
}

/// Validates the config, then dispatches on its command.
pub fn run(config: &RunConfig) -> Result<RunOutput, ConfigError> {
    config.validate()?;
    let prior = config.prior.build().expect("validated");
    let cfg = config.solver_config();
    Ok(match config.command.expect("validated") {
        Command::Sweep => run_sweep(config, &prior, &cfg),
        Command::FiniteN => run_finite_n(config, &prior, &cfg),
        Command::RmtCheck => run_rmt_check(config, &prior),
        Command::ReplicaCompare => run_replica_compare(config, &prior, &cfg),
        Command::PhaseScan => run_phase_scan(config, &prior, &cfg),
    })
}

fn sweep_row(p: &ModelParams, prior: &SparsityPrior, cfg: &SolverConfig) -> Row {
    let (kind, params) = prior.describe();
    let mut head = lead(p);
    head.extend([kind.to_string(), params, fmt_num(prior.m_a())]);
    let body = || -> crate::Result<Vec<String>> {
        let ctx = ScalarContext::new(*p, prior.clone())?;
        let (sols, d) = solve_mmse(&ctx, cfg)?;
        let s = &sols[0];
        let d_rep = match prior.iid_p() {
            Some(q) => fmt_num(replica_mmse(p, q)?.selected.d_replica),
            None => String::new(),
        };
        Ok(vec![
            fmt_num(s.m_star),
            fmt_num(s.gamma_star),
            fmt_num(s.rho1),
            fmt_num(s.rho2),
            fmt_num(s.rho3),
            fmt_num(s.free_energy),
            fmt_num(d),
            fmt_num(p.beta * d),
            fmt_num(oracle_e(prior.m_a(), p)),
            d_rep,
            fmt_bool(s.degenerate_flag),
            sols.len().to_string(),
            String::new(),
        ])
    };
    match body() {
        Ok(rest) => {
            head.extend(rest);
            Row::ok(head, true)
        }
        Err(e) => Row::error(head, SWEEP_COLUMNS.len(), &e),
    }
}

/// One row per `(R, β)`: the selected fixed point, its MMSE and the baselines.
pub fn run_sweep(config: &RunConfig, prior: &SparsityPrior, cfg: &SolverConfig) -> RunOutput {
    let rows: Vec<Row> = config.cells().par_iter().map(|p| sweep_row(p, prior, cfg)).collect();
    let mut t = Table::new(SWEEP_COLUMNS);
    rows.into_iter().for_each(|r| t.push(r));
    t.finish()
}

/// Exact Monte-Carlo MMSE at size `n` against the asymptotic prediction.
pub fn run_finite_n(config: &RunConfig, prior: &SparsityPrior, cfg: &SolverConfig) -> RunOutput {
    let mut t = Table::new(FINITE_N_COLUMNS);
    let (n, trials) = (config.n.unwrap_or(0), config.trials.unwrap_or(0));
    if trials == 0 {
        return t.finish();
    }
    let tol = &config.tolerances;
    let opts = McOptions {
        ensemble: config.ensemble,
        ..McOptions::default()
    };
    let (kind, params) = prior.describe();
    for p in config.cells() {
        let mut head = lead(&p);
        head.extend([
            kind.to_string(),
            params.clone(),
            n.to_string(),
            trials.to_string(),
            config.seed.to_string(),
        ]);
        let body = || -> crate::Result<(Vec<String>, bool)> {
            let ctx = ScalarContext::new(p, prior.clone())?;
            let (_, d) = solve_mmse(&ctx, cfg)?;
            let mc = mc_mmse(prior, &p, n, trials, config.seed, &opts)?;
            let gap = (mc.estimate - d).abs();
            let band = (tol.finite_n_se_multiple * mc.std_error).max(tol.finite_n_relative * d);
            let pass = gap <= band;
            Ok((
                vec![
                    fmt_num(mc.estimate),
                    fmt_num(mc.std_error),
                    fmt_num(mc.direct_estimate),
                    fmt_num(mc.direct_std_error),
                    fmt_num(d),
                    fmt_num(gap),
                    fmt_num(band),
                    fmt_bool(pass),
                    String::new(),
                ],
                pass,
            ))
        };
        t.push(match body() {
            Ok((rest, pass)) => {
                head.extend(rest);
                Row::ok(head, pass)
            }
            Err(e) => Row::error(head, FINITE_N_COLUMNS.len(), &e),
        });
    }
    t.finish()
}

/// Four rows per `(R, β, n, seed)`, one per deterministic-equivalent check.
pub fn run_rmt_check(config: &RunConfig, prior: &SparsityPrior) -> RunOutput {
    let s = &config.rmt;
    let tol = config.tolerances.rmt_scaled;
    let mut t = Table::new(RMT_COLUMNS);
    for p in config.cells() {
        for &n in &s.sizes {
            for j in 0..s.repetitions {
                let seed = config.seed.wrapping_add(j);
                let rep = ScalarContext::new(p, prior.clone())
                    .and_then(|ctx| rmt_report(n, s.m_s, s.m_r, s.m_sr, &ctx, seed, config.ensemble));
                let mut head = lead(&p);
                head.push(n.to_string());
                match rep {
                    Ok(r) => {
                        head.extend([
                            r.k.to_string(),
                            fmt_num(s.m_s),
                            fmt_num(s.m_r),
                            fmt_num(s.m_sr),
                            seed.to_string(),
                        ]);
                        let checks: [(&str, RmtCheck); 4] = [
                            ("stieltjes", r.stieltjes),
                            ("shannon", r.shannon),
                            ("f_n", r.f_n),
                            ("q_n", r.q_n),
                        ];
                        for (name, c) in checks {
                            let pass = c.scaled_gap() < tol;
                            let mut row = head.clone();
                            row.extend([
                                name.to_string(),
                                fmt_num(c.empirical),
                                fmt_num(c.equivalent),
                                fmt_num(c.gap),
                                fmt_num(c.scaled_gap()),
                                fmt_bool(pass),
                                String::new(),
                            ]);
                            t.push(Row::ok(row, pass));
                        }
                    }
                    Err(e) => t.push(Row::error(head, RMT_COLUMNS.len(), &e)),
                }
            }
        }
    }
    t.finish()
}

/// Asymptotic MMSE against the state-evolution reference (i.i.d. priors only).
pub fn run_replica_compare(config: &RunConfig, prior: &SparsityPrior, cfg: &SolverConfig) -> RunOutput {
    let q = prior.iid_p().expect("validated");
    let tol = config.tolerances.replica_relative;
    let rows: Vec<Row> = config
        .cells()
        .par_iter()
        .map(|p| {
            let mut head = lead(p);
            head.push(fmt_num(q));
            let body = || -> crate::Result<(Vec<String>, bool)> {
                let ctx = ScalarContext::new(*p, prior.clone())?;
                let (sols, d) = solve_mmse(&ctx, cfg)?;
                let rep = replica_mmse(p, q)?;
                let rel = (d - rep.selected.d_replica).abs() / d;
                let pass = rel <= tol;
                Ok((
                    vec![
                        fmt_num(sols[0].m_star),
                        fmt_num(d),
                        fmt_num(rep.selected.d_replica),
                        fmt_num(rep.selected.tau2),
                        rep.branches.len().to_string(),
                        fmt_num(rel),
                        fmt_bool(pass),
                        String::new(),
                    ],
                    pass,
                ))
            };
            match body() {
                Ok((rest, pass)) => {
                    head.extend(rest);
                    Row::ok(head, pass)
                }
                Err(e) => Row::error(head, REPLICA_COLUMNS.len(), &e),
            }
        })
        .collect();
    let mut t = Table::new(REPLICA_COLUMNS);
    rows.into_iter().for_each(|r| t.push(r));
    t.finish()
}

/// Sweeps `scan_axis` with the other parameter fixed at its first grid value.
/// Grid rows come first, then one `crossing` row per located jump of `m°`.
pub fn run_phase_scan(config: &RunConfig, prior: &SparsityPrior, cfg: &SolverConfig) -> RunOutput {
    let mut t = Table::new(PHASE_COLUMNS);
    let (rates, betas) = (config.rates.values(), config.beta.linear());
    let (axis, values, fixed_rate, fixed_beta) = match config.scan_axis {
        ScanAxis::Rate => ("rate", rates.clone(), None, betas.first().copied()),
        ScanAxis::Beta => ("beta", betas.clone(), rates.first().copied(), None),
    };
    let (Some(rate), Some(beta)) = (
        fixed_rate.or(rates.first().copied()),
        fixed_beta.or(betas.first().copied()),
    ) else {
        return t.finish();
    };
    let base = ModelParams {
        rate,
        beta,
        sigma2: config.sigma2,
    };
    let at = |v: f64| match config.scan_axis {
        ScanAxis::Rate => base.with_rate(v),
        ScanAxis::Beta => base.with_beta(v),
    };
    let scan = ScalarContext::new(base, prior.clone()).and_then(|ctx| phase_scan(&ctx, config.scan_axis, &values, cfg));
    match scan {
        Ok(scan) => {
            for row in &scan.rows {
                let p = at(row.value);
                let s = &row.solutions[0];
                let runner = row.solutions.get(1);
                let mut cells = vec!["grid".to_string(), axis.to_string(), fmt_num(row.value)];
                cells.extend(lead(&p));
                cells.extend([
                    fmt_num(s.m_star),
                    fmt_num(s.gamma_star),
                    fmt_num(s.free_energy),
                    fmt_num(row.mmse),
                    fmt_num(row.noise_sensitivity),
                    row.solutions.len().to_string(),
                    fmt_bool(s.degenerate_flag),
                    runner.map_or(String::new(), |r| fmt_num(r.m_star)),
                    runner.map_or(String::new(), |r| fmt_num(r.free_energy)),
                    String::new(),
                ]);
                t.push(Row::ok(cells, true));
            }
            for &c in &scan.crossings {
                let p = at(c);
                let mut cells = vec!["crossing".to_string(), axis.to_string(), fmt_num(c)];
                cells.extend(lead(&p));
                cells.resize(PHASE_COLUMNS.len(), String::new());
                t.push(Row::ok(cells, true));
            }
        }
        Err(e) => {
            let mut cells = vec!["grid".to_string(), axis.to_string()];
            cells.resize(3, String::new());
            cells.extend(lead(&base));
            t.push(Row::error(cells, PHASE_COLUMNS.len(), &e));
        }
    }
    t.finish()
}
