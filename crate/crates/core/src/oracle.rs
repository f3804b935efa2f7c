//! MMSE of the support-aware (genie) estimator.
//!
//! Knowing the support with magnetization `m`, the per-component error `E`
//! solves `E = σ² m / (1 + R β σ² / (1 + β E))`. Its positive root is
//! `E(m) = σ² m b(m)`, and `β E(m)` stays bounded as `β → ∞` iff `R > m`.

use crate::model::{ModelParams, SparsityPrior};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleResult {
    /// `E(m_a)`, the genie MMSE at the prior's dominant magnetization.
    pub asymptotic: f64,
    /// `m_a`: the noise sensitivity of the genie stays bounded iff `R > m_a`.
    pub threshold: f64,
}

/// `E(m) = [−a + √(a² + 4βσ²m)] / (2β)` with `a = 1 + βσ²(R − m)`.
pub fn oracle_e(m: f64, params: &ModelParams) -> f64 {
    if m <= 0.0 {
        return 0.0;
    }
    let ModelParams { rate: r, beta, sigma2 } = *params;
    let c = beta * sigma2;
    let a = 1.0 + c * (r - m);
    let disc = (a * a + 4.0 * c * m).sqrt();
    if a >= 0.0 {
        2.0 * sigma2 * m / (a + disc)
    } else {
        (disc - a) / (2.0 * beta)
    }
}

pub fn oracle_threshold(prior: &SparsityPrior) -> f64 {
    prior.m_a()
}

pub fn oracle(prior: &SparsityPrior, params: &ModelParams) -> OracleResult {
    let m_a = prior.m_a();
    OracleResult {
        asymptotic: oracle_e(m_a, params),
        threshold: m_a,
    }
}
