//! State-evolution reference for i.i.d. Bernoulli–Gaussian sources.
//!
//! With `H` having entry variance `1/n`, rescaling to unit-norm columns turns
//! the problem into the usual decoupled form: each component is seen through
//! a scalar Gaussian channel of noise variance `τ²`, where
//!
//! ```text
//! τ² = 1/(βR) + mmse(τ²) / R.
//! ```
//!
//! The first term is the measurement noise per effective sample and the
//! second the interference from the other components.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numeric::brent;
use crate::quadrature::{k_from_l, Kink, MixtureQ, QuadratureRule};

/// One fixed point of the state-evolution equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicaSolution {
    pub tau2: f64,
    pub d_replica: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaResult {
    /// Fixed point reached by iterating from the uninformed start `τ₀² = 1/(βR) + pσ²/R`.
    pub selected: ReplicaSolution,
    /// Every fixed point found, in increasing `τ²`.
    pub branches: Vec<ReplicaSolution>,
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("p", format!("must lie in (0,1], got {p}")))
    }
}

/// MMSE of `X = S U` (`S ~ Bernoulli(p)`, `U ~ N(0, σ²)`) from `V = X + N(0, τ²)`.
///
/// The posterior probability that `S = 1` is a logistic function of `V²`,
/// so it has exactly the kernel form `½(1 + tanh((L V² − γ)/2))` and the same
/// quadrature applies.
pub fn scalar_bg_mmse(tau2: f64, p: f64, sigma2: f64) -> Result<f64> {
    scalar_bg_mmse_with(tau2, p, sigma2, &QuadratureRule::default())
}

pub fn scalar_bg_mmse_with(tau2: f64, p: f64, sigma2: f64, rule: &QuadratureRule) -> Result<f64> {
    if tau2.is_nan() || tau2 <= 0.0 {
        return Err(Error::invalid("tau2", format!("must be positive, got {tau2}")));
    }
    check_p(p)?;
    let shrink = sigma2 / (sigma2 + tau2);
    if p == 1.0 {
        return Ok(sigma2 * tau2 / (sigma2 + tau2));
    }
    let l = 0.5 * (1.0 / tau2 - 1.0 / (sigma2 + tau2));
    let gamma = -((p / (1.0 - p)).ln() + 0.5 * (tau2 / (sigma2 + tau2)).ln());
    let mix = MixtureQ::new(p, tau2, sigma2 + tau2)?;
    let e = rule.expect(
        &mix,
        &|v2| {
            let k = k_from_l(l, v2, gamma);
            k * k * v2
        },
        Some(Kink { l, gamma }),
    )?;
    Ok((p * sigma2 - shrink * shrink * e).max(0.0))
}

/// All state-evolution fixed points, with the uninformed-start branch selected.
pub fn replica_mmse(params: &ModelParams, p: f64) -> Result<ReplicaResult> {
    params.validate()?;
    check_p(p)?;
    let ModelParams { rate: r, beta, sigma2 } = *params;
    let floor = 1.0 / (beta * r);
    let mmse = |t: f64| scalar_bg_mmse(t, p, sigma2);
    let map = |t: f64| -> Result<f64> { Ok(floor + mmse(t)? / r) };

    // Iteration from above is monotone; damping only guards against round-off ping-pong.
    let mut tau2 = floor + p * sigma2 / r;
    let mut converged = false;
    for _ in 0..10_000 {
        let next = 0.5 * tau2 + 0.5 * map(tau2)?;
        let done = (next - tau2).abs() <= 1e-15 * tau2;
        tau2 = next;
        if done {
            converged = true;
            break;
        }
    }

    // Sign changes of τ² − map(τ²) on a log grid give every branch.
    let hi = floor + p * sigma2 / r;
    let gap = |t: f64| map(t).map(|v| t - v).unwrap_or(f64::NAN);
    let grid: Vec<f64> = (0..=400)
        .map(|i| floor * (hi / floor).powf(i as f64 / 400.0) * (1.0 + 1e-12))
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&t| gap(t)).collect();
    let mut branches = Vec::new();
    for i in 0..grid.len() - 1 {
        if vals[i] == 0.0 || vals[i].signum() != vals[i + 1].signum() {
            if let Some(t) = brent(gap, grid[i], grid[i + 1], 1e-16 * grid[i], 300) {
                branches.push(ReplicaSolution {
                    tau2: t,
                    d_replica: mmse(t)?,
                    converged: true,
                });
            }
        }
    }
    // Polish the iterate on its bracket when the scan found it.
    if let Some(b) = branches
        .iter()
        .filter(|b| (b.tau2 - tau2).abs() < 1e-6 * tau2)
        .min_by(|a, b| (a.tau2 - tau2).abs().partial_cmp(&(b.tau2 - tau2).abs()).unwrap())
    {
        tau2 = b.tau2;
        converged = true;
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "state evolution did not settle at R={r}, beta={beta}"
        )));
    }
    let selected = ReplicaSolution {
        tau2,
        d_replica: mmse(tau2)?,
        converged,
    };
    if branches.is_empty() {
        branches.push(selected);
    }
    Ok(ReplicaResult { selected, branches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn dense_gaussian_closed_form() {
        let v = scalar_bg_mmse(0.3, 1.0, 2.0).unwrap();
        assert!((v - 2.0 * 0.3 / 2.3).abs() < 1e-15);
        // Just below p = 1 the mixture path must approach the same value.
        let near = scalar_bg_mmse(0.3, 1.0 - 1e-9, 2.0).unwrap();
        assert!((near - v).abs() < 1e-7);
    }

    #[test]
    fn no_information_limit() {
        let v = scalar_bg_mmse(1e8, 0.1, 1.0).unwrap();
        assert!((v - 0.1).abs() < 1e-6);
    }

    #[test]
    fn matches_monte_carlo() {
        let (p, s2, tau2) = (0.1, 1.0, 0.05);
        let want = scalar_bg_mmse(tau2, p, s2).unwrap();
        let mut rng = crate::rng::stream(23, 0);
        let draws = 10_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        let ln_ratio = (p / (1.0 - p)).ln() + 0.5 * (tau2 / (s2 + tau2)).ln();
        for _ in 0..draws {
            let on = rng.random::<f64>() < p;
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let x = if on { s2.sqrt() * z1 } else { 0.0 };
            let v = x + tau2.sqrt() * z2;
            let logit = ln_ratio + 0.5 * v * v * (1.0 / tau2 - 1.0 / (s2 + tau2));
            let post = 1.0 / (1.0 + (-logit).exp());
            let err = (x - post * s2 / (s2 + tau2) * v).powi(2);
            sum += err;
            sq += err * err;
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "{mean} vs {want} (se {se})");
    }

    #[test]
    fn zero_snr_and_dense_identity() {
        let r = replica_mmse(&ModelParams::new(0.3, 1e-9, 1.0).unwrap(), 0.1).unwrap();
        assert!((r.selected.d_replica - 0.1).abs() < 1e-6);
        for &(rate, beta) in &[(0.5, 10.0), (1.5, 3.0), (0.3, 100.0)] {
            let params = ModelParams::new(rate, beta, 1.0).unwrap();
            let d = replica_mmse(&params, 1.0).unwrap().selected.d_replica;
            let o = crate::oracle::oracle_e(1.0, &params);
            assert!((d - o).abs() < 1e-8, "{d} vs {o}");
        }
    }

    #[test]
    fn fixed_points_bounded_and_monotone() {
        let mut prev = f64::INFINITY;
        for k in 0..=16 {
            let beta = 10f64.powf(k as f64 / 4.0);
            let params = ModelParams::new(0.3, beta, 1.0).unwrap();
            let res = replica_mmse(&params, 0.1).unwrap();
            for b in &res.branches {
                assert!(b.tau2 >= 1.0 / (beta * 0.3) * (1.0 - 1e-12));
                assert!(b.d_replica >= 0.0 && b.d_replica <= 0.1 + 1e-12);
            }
            assert!(res.selected.d_replica <= prev + 1e-12);
            prev = res.selected.d_replica;
        }
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let params = ModelParams::new(0.1 * k as f64, 30.0, 1.0).unwrap();
            let d = replica_mmse(&params, 0.1).unwrap().selected.d_replica;
            assert!(d <= prev + 1e-12);
            prev = d;
        }
    }
}
