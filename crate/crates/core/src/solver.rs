//! Fixed-point system for the posterior magnetization `m°` and its
//! conjugate field `γ°`, free-energy selection, and the asymptotic MMSE.
//!
//! The system is
//!
//! ```text
//! γ = −L'(m) E[K Q²] − t'(m)
//! m = E[K]
//! ```
//!
//! with `K = ½(1 + tanh((L(m) Q² − γ)/2))`. Two searches feed one candidate
//! pool: damped iteration from a grid of starting magnetizations, and a
//! profile scan that solves the (monotone) second equation for `γ` at each
//! `m` and brackets sign changes of the first. The damped iteration alone
//! stalls once `β` is large enough for `K` to become a near step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{brent, ln_2cosh};
use crate::quadrature::{k_from_l, rho_moments_with, Kink, MixtureExpectation, MixtureQ, QExpectation, QuadratureRule};
use crate::scalar::ScalarContext;

/// Which printed variant of the MMSE expression to evaluate.
///
/// `Derived` multiplies `P_y` by `m°` inside the middle term, which is the
/// form the limit of the finite-n expression actually produces and the one
/// that reduces to the prior variance at zero SNR. `AsStated` keeps `P_y`
/// alone, as in the closed-form statement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmseForm {
    #[default]
    Derived,
    AsStated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub damping: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Starting magnetizations for damped iteration.
    pub starts: Vec<f64>,
    pub cluster_radius: f64,
    pub degenerate_tol: f64,
    /// Number of logit-spaced magnetizations in the profile scan; 0 disables it.
    pub scan_points: usize,
    pub rule: QuadratureRule,
    pub form: MmseForm,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            damping: 0.5,
            tolerance: 1e-10,
            max_iter: 10_000,
            starts: (0..33).map(|i| 0.02 + 0.03 * i as f64).collect(),
            cluster_radius: 1e-6,
            degenerate_tol: 1e-8,
            scan_points: 200,
            rule: QuadratureRule::default(),
            form: MmseForm::Derived,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointSolution {
    pub m_star: f64,
    pub gamma_star: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub free_energy: f64,
    pub iterations: usize,
    /// `max(|r_m|, |r_γ| / max(1, |γ|))`; `γ` grows like `β`, so its residual is taken relative.
    pub residual: f64,
    pub degenerate_flag: bool,
}

fn mixture(ctx: &ScalarContext, cfg: &SolverConfig) -> Result<MixtureExpectation> {
    Ok(MixtureExpectation {
        mix: MixtureQ::from_context(ctx)?,
        rule: cfg.rule.clone(),
    })
}

fn check_m(m: f64) -> Result<()> {
    if m > 0.0 && m < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("magnetization must be interior, got {m}")))
    }
}

/// Right-hand sides `(−L' E[KQ²] − t', E[K])` at `(m, γ)`.
fn rhs<E: QExpectation + ?Sized>(ctx: &ScalarContext, e: &E, m: f64, gamma: f64) -> (f64, f64) {
    let s = ctx.eval_unchecked(m);
    let l = s.l;
    let v = e.expect_multi(
        &|q2, o: &mut [f64]| {
            let k = k_from_l(l, q2, gamma);
            o[0] = k * q2;
            o[1] = k;
        },
        2,
        Some(Kink { l, gamma }),
    );
    (-s.l_prime * v[0] - s.t_prime, v[1])
}

fn expected_k<E: QExpectation + ?Sized>(e: &E, l: f64, gamma: f64) -> f64 {
    e.expect_multi(
        &|q2, o: &mut [f64]| o[0] = k_from_l(l, q2, gamma),
        1,
        Some(Kink { l, gamma }),
    )[0]
}

pub fn residuals_with<E: QExpectation + ?Sized>(ctx: &ScalarContext, e: &E, m: f64, gamma: f64) -> Result<(f64, f64)> {
    check_m(m)?;
    let (g, k) = rhs(ctx, e, m, gamma);
    Ok((gamma - g, m - k))
}

/// `(r_γ, r_m)` under the asymptotic mixture with the default rule.
pub fn residuals(ctx: &ScalarContext, m: f64, gamma: f64) -> Result<(f64, f64)> {
    residuals_with(ctx, &mixture(ctx, &SolverConfig::default())?, m, gamma)
}

fn scaled_residual(r: (f64, f64), gamma: f64) -> f64 {
    (r.0.abs() / gamma.abs().max(1.0)).max(r.1.abs())
}

pub fn free_energy_with<E: QExpectation + ?Sized>(ctx: &ScalarContext, e: &E, m: f64, gamma: f64) -> Result<f64> {
    check_m(m)?;
    let s = ctx.eval_unchecked(m);
    let l = s.l;
    let v = e.expect_multi_checked(
        &|q2, o: &mut [f64]| o[0] = ln_2cosh(0.5 * (l * q2 - gamma)),
        1,
        Some(Kink { l, gamma }),
    )?;
    Ok(s.t + (m - 0.5) * gamma + 0.5 * l * e.second_moment() + v[0])
}

/// Selection functional `t(m) + (m − ½)γ + E[½ L Q² + ln 2cosh((L Q² − γ)/2)]`.
pub fn free_energy(ctx: &ScalarContext, m: f64, gamma: f64) -> Result<f64> {
    free_energy_with(ctx, &mixture(ctx, &SolverConfig::default())?, m, gamma)
}

/// Solves `E[K(m, γ)] = m` for `γ`; `E[K]` decreases strictly in `γ`.
fn profile_gamma<E: QExpectation + ?Sized>(e: &E, l: f64, m: f64) -> Option<f64> {
    let h = |gamma: f64| expected_k(e, l, gamma) - m;
    let (mut lo, mut hi) = (-1.0, 1.0);
    let mut tries = 0;
    while h(lo) <= 0.0 {
        lo *= 4.0;
        tries += 1;
        if tries > 200 {
            return None;
        }
    }
    while h(hi) >= 0.0 {
        hi *= 4.0;
        tries += 1;
        if tries > 400 {
            return None;
        }
    }
    brent(h, lo, hi, 1e-15, 300)
}

fn logit_grid(points: usize) -> Vec<f64> {
    let (a, b) = ((1e-4f64 / (1.0 - 1e-4)).ln(), ((1.0 - 1e-4) / 1e-4f64).ln());
    (0..points)
        .map(|i| {
            let u = a + (b - a) * i as f64 / (points - 1).max(1) as f64;
            1.0 / (1.0 + (-u).exp())
        })
        .collect()
}

/// Candidates from sign changes of `γ_m − RHS_γ(m, γ_m)` along a magnetization grid.
fn profile_scan<E: QExpectation + ?Sized>(ctx: &ScalarContext, e: &E, points: usize) -> Vec<(f64, f64, usize)> {
    if points < 2 {
        return Vec::new();
    }
    let gap = |m: f64| -> Option<(f64, f64)> {
        let l = ctx.eval_unchecked(m).l;
        let gamma = profile_gamma(e, l, m)?;
        let (g, _) = rhs(ctx, e, m, gamma);
        Some((gamma - g, gamma))
    };
    let grid = logit_grid(points);
    let vals: Vec<Option<(f64, f64)>> = grid.iter().map(|&m| gap(m)).collect();
    let mut out = Vec::new();
    for i in 0..grid.len() - 1 {
        let (Some((fa, _)), Some((fb, _))) = (vals[i], vals[i + 1]) else {
            continue;
        };
        if fa == 0.0 || fa.signum() != fb.signum() {
            let mut evals = 0;
            let root = brent(
                |m| {
                    evals += 1;
                    gap(m).map_or(f64::NAN, |v| v.0)
                },
                grid[i],
                grid[i + 1],
                1e-15,
                200,
            );
            if let Some(m) = root {
                if let Some((_, gamma)) = gap(m) {
                    out.push((m, gamma, evals));
                }
            }
        }
    }
    out
}

/// Damped alternating iteration from one start.
fn damped<E: QExpectation + ?Sized>(
    ctx: &ScalarContext,
    e: &E,
    cfg: &SolverConfig,
    m0: f64,
) -> Option<(f64, f64, usize)> {
    let s0 = ctx.eval_unchecked(m0);
    let mut m = m0;
    let mut gamma = -s0.l_prime * m0 * e.second_moment() - s0.t_prime;
    let mut eta = cfg.damping;
    let mut prev_step = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let (g_rhs, _) = rhs(ctx, e, m, gamma);
        let new_gamma = (1.0 - eta) * gamma + eta * g_rhs;
        let l = ctx.eval_unchecked(m).l;
        let m_rhs = expected_k(e, l, new_gamma);
        let new_m = ((1.0 - eta) * m + eta * m_rhs).clamp(1e-12, 1.0 - 1e-12);
        let step = ((new_gamma - gamma).abs() / new_gamma.abs().max(1.0)).max((new_m - m).abs());
        gamma = new_gamma;
        m = new_m;
        if !step.is_finite() {
            return None;
        }
        if step < cfg.tolerance * eta {
            let r = residuals_with(ctx, e, m, gamma).ok()?;
            return (scaled_residual(r, gamma) < 10.0 * cfg.tolerance).then_some((m, gamma, it));
        }
        if step > prev_step {
            eta *= 0.5;
            if eta < 1e-6 {
                return None;
            }
        }
        prev_step = step;
    }
    None
}

/// All fixed points found for the given expectation, best free energy first.
pub fn solve_with<E: QExpectation + ?Sized>(
    ctx: &ScalarContext,
    e: &E,
    cfg: &SolverConfig,
) -> Result<Vec<FixedPointSolution>> {
    let mut raw: Vec<(f64, f64, usize)> = cfg
        .starts
        .par_iter()
        .filter(|&&m0| m0 > 0.0 && m0 < 1.0)
        .filter_map(|&m0| damped(ctx, e, cfg, m0))
        .collect();
    raw.extend(profile_scan(ctx, e, cfg.scan_points));

    let mut candidates: Vec<FixedPointSolution> = Vec::new();
    for (m, gamma, iterations) in raw {
        if !(m > 0.0 && m < 1.0) {
            continue;
        }
        let r = residuals_with(ctx, e, m, gamma)?;
        let residual = scaled_residual(r, gamma);
        if residual > 1e3 * cfg.tolerance.max(1e-12) {
            continue;
        }
        let near = |c: &FixedPointSolution| {
            (c.m_star - m).abs() < cfg.cluster_radius
                && (c.gamma_star - gamma).abs() < cfg.cluster_radius * gamma.abs().max(1.0)
        };
        if let Some(existing) = candidates.iter_mut().find(|c| near(c)) {
            if residual < existing.residual {
                existing.m_star = m;
                existing.gamma_star = gamma;
                existing.residual = residual;
            }
            continue;
        }
        candidates.push(FixedPointSolution {
            m_star: m,
            gamma_star: gamma,
            rho1: 0.0,
            rho2: 0.0,
            rho3: 0.0,
            free_energy: 0.0,
            iterations,
            residual,
            degenerate_flag: false,
        });
    }
    if candidates.is_empty() {
        return Err(Error::NoConvergence(format!(
            "no fixed point found at R={}, beta={}, sigma2={}",
            ctx.params.rate, ctx.params.beta, ctx.params.sigma2
        )));
    }
    for c in candidates.iter_mut() {
        let (r1, r2, r3) = rho_moments_with(ctx, e, c.m_star, c.gamma_star)?;
        c.rho1 = r1;
        c.rho2 = r2;
        c.rho3 = r3;
        c.free_energy = free_energy_with(ctx, e, c.m_star, c.gamma_star)?;
    }
    candidates.sort_by(|a, b| {
        b.free_energy
            .partial_cmp(&a.free_energy)
            .unwrap()
            .then(a.m_star.partial_cmp(&b.m_star).unwrap())
    });
    let fes: Vec<f64> = candidates.iter().map(|c| c.free_energy).collect();
    for (i, c) in candidates.iter_mut().enumerate() {
        c.degenerate_flag = fes
            .iter()
            .enumerate()
            .any(|(j, f)| j != i && (f - c.free_energy).abs() < cfg.degenerate_tol * c.free_energy.abs().max(1.0));
    }
    Ok(candidates)
}

/// All fixed points of the asymptotic system; the head is the selected one.
pub fn solve(ctx: &ScalarContext, cfg: &SolverConfig) -> Result<Vec<FixedPointSolution>> {
    solve_with(ctx, &mixture(ctx, cfg)?, cfg)
}

/// Asymptotic MMSE per component at a converged solution.
pub fn mmse(ctx: &ScalarContext, sol: &FixedPointSolution, form: MmseForm) -> Result<f64> {
    let m = sol.m_star;
    let s = ctx.eval(m)?;
    let crate::model::ModelParams { beta, sigma2, .. } = ctx.params;
    let a_mm = ctx.alpha(m, m)?;
    let a_m2 = ctx.alpha(m, sol.rho2.clamp(0.0, 1.0))?;
    let p = match form {
        MmseForm::Derived => ctx.p_y * m,
        MmseForm::AsStated => ctx.p_y,
    };
    let (b, g) = (s.b, s.g);
    Ok(sigma2 * m * b
        + 2.0 * b / (g * g * g) * beta.powi(3) * sigma2 * (p - sol.rho1) * (m * a_mm - sol.rho2 * a_m2)
        + beta * beta / (g * g) * (a_mm * sol.rho1 - a_m2 * sol.rho3))
}

/// Selected solution and its MMSE.
pub fn solve_mmse(ctx: &ScalarContext, cfg: &SolverConfig) -> Result<(Vec<FixedPointSolution>, f64)> {
    let sols = solve(ctx, cfg)?;
    let d = mmse(ctx, &sols[0], cfg.form)?;
    Ok((sols, d))
}

/// `β · D(R, β)`.
pub fn noise_sensitivity(ctx: &ScalarContext, cfg: &SolverConfig) -> Result<f64> {
    Ok(ctx.params.beta * solve_mmse(ctx, cfg)?.1)
}

/// Which parameter a phase scan sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanAxis {
    Rate,
    Beta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseScanRow {
    pub value: f64,
    pub solutions: Vec<FixedPointSolution>,
    pub mmse: f64,
    pub noise_sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseScan {
    pub rows: Vec<PhaseScanRow>,
    /// Parameter values where the leading branch changes, located by bisection.
    pub crossings: Vec<f64>,
}

fn with_axis(ctx: &ScalarContext, axis: ScanAxis, value: f64) -> Result<ScalarContext> {
    let params = match axis {
        ScanAxis::Rate => ctx.params.with_rate(value),
        ScanAxis::Beta => ctx.params.with_beta(value),
    };
    ScalarContext::new(params, ctx.prior.clone())
}

/// Sweeps one parameter and locates jumps of the selected magnetization.
pub fn phase_scan(ctx: &ScalarContext, axis: ScanAxis, values: &[f64], cfg: &SolverConfig) -> Result<PhaseScan> {
    let rows: Vec<PhaseScanRow> = values
        .iter()
        .map(|&v| {
            let c = with_axis(ctx, axis, v)?;
            let (solutions, d) = solve_mmse(&c, cfg)?;
            Ok(PhaseScanRow {
                value: v,
                solutions,
                mmse: d,
                noise_sensitivity: c.params.beta * d,
            })
        })
        .collect::<Result<_>>()?;

    let mut crossings = Vec::new();
    for w in rows.windows(2) {
        let (ml, mr) = (w[0].solutions[0].m_star, w[1].solutions[0].m_star);
        // The leader switches branch when it lands nearer a runner-up on the
        // other side than to the previous leader; smooth drift never bisects.
        let near_runner_up = |sols: &[FixedPointSolution], target: f64, leader: f64| {
            sols[1..]
                .iter()
                .any(|s| (s.m_star - target).abs() < (leader - target).abs())
        };
        if (ml - mr).abs() < 1e-3
            || !(near_runner_up(&w[0].solutions, mr, ml) || near_runner_up(&w[1].solutions, ml, mr))
        {
            continue;
        }
        let (mut lo, mut hi) = (w[0].value, w[1].value);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let c = with_axis(ctx, axis, mid)?;
            let m = solve(&c, cfg)?[0].m_star;
            if (m - ml).abs() <= (m - mr).abs() {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo).abs() < 1e-10 * hi.abs().max(1.0) {
                break;
            }
        }
        crossings.push(0.5 * (lo + hi));
    }
    Ok(PhaseScan { rows, crossings })
}
