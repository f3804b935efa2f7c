//! Auxiliary scalar functions of the asymptotic MMSE and their analytic
//! derivatives.
//!
//! With `c = βσ²` and `a(x) = 1 + c(R − x)`, `b(x)` is the positive root of
//! `c x b² + a b − 1 = 0`. Everything else is built from `b`:
//! `g = 1 + c x b`, `Ī = (R/x) ln g − ln b − c R b / g`,
//! `V = β c² b² x² / (2g²)`, `L = β c b / (2g²)` and
//! `t = f − (x/2) Ī + V P_y`.

use crate::error::{Error, Result};
use crate::model::{ModelParams, SparsityPrior};

/// All auxiliary values at one point, with first derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarValues {
    pub x: f64,
    pub b: f64,
    pub g: f64,
    pub i_bar: f64,
    pub v: f64,
    pub l: f64,
    pub t: f64,
    pub b_prime: f64,
    pub g_prime: f64,
    pub i_bar_prime: f64,
    pub v_prime: f64,
    pub l_prime: f64,
    pub t_prime: f64,
}

/// Model parameters plus the prior-dependent constants `m_a` and `P_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarContext {
    pub params: ModelParams,
    pub prior: SparsityPrior,
    pub m_a: f64,
    pub p_y: f64,
}

impl ScalarContext {
    pub fn new(params: ModelParams, prior: SparsityPrior) -> Result<Self> {
        params.validate()?;
        let m_a = prior.m_a();
        let p_y = m_a * params.sigma2 * params.rate + params.rate / params.beta;
        Ok(ScalarContext {
            params,
            prior,
            m_a,
            p_y,
        })
    }

    /// Replace `P_y` in `t`, e.g. by the observed `‖y‖²/n` in empirical systems.
    pub fn with_p_y(mut self, p_y: f64) -> Self {
        self.p_y = p_y;
        self
    }

    fn c(&self) -> f64 {
        self.params.beta * self.params.sigma2
    }

    fn check(x: f64) -> Result<()> {
        if x > 0.0 && x <= 1.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!("auxiliary functions need x in (0,1], got {x}")))
        }
    }

    /// `b(x)` and `√(a² + 4cx)`; the branch avoids cancellation for either sign of `a`.
    fn b_and_disc(&self, x: f64) -> (f64, f64) {
        let c = self.c();
        let a = 1.0 + c * (self.params.rate - x);
        let disc = (a * a + 4.0 * c * x).sqrt();
        let b = if a >= 0.0 {
            2.0 / (a + disc)
        } else {
            (disc - a) / (2.0 * c * x)
        };
        (b, disc)
    }

    pub fn b(&self, x: f64) -> Result<f64> {
        Self::check(x)?;
        Ok(self.b_and_disc(x).0)
    }

    /// Total extension of `b` to `x ∈ [0, 1]`; `b(0) = 1/(1 + βσ²R)`.
    pub fn b_total(&self, x: f64) -> Result<f64> {
        if x == 0.0 {
            return Ok(1.0 / (1.0 + self.c() * self.params.rate));
        }
        self.b(x)
    }

    pub fn eval(&self, x: f64) -> Result<ScalarValues> {
        Self::check(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> ScalarValues {
        let ModelParams { rate: r, beta, .. } = self.params;
        let c = self.c();
        let (b, disc) = self.b_and_disc(x);
        // 1 − b rewritten through the quadratic when b is close to 1.
        let one_minus_b = if b > 0.5 { b * c * (r - x + x * b) } else { 1.0 - b };
        let b_prime = c * b * one_minus_b / disc;

        let g = 1.0 + c * x * b;
        let g_prime = c * b + c * x * b_prime;

        let ln_g = g.ln();
        let i_bar = r / x * ln_g - b.ln() - c * r * b / g;
        let i_bar_prime =
            -r / (x * x) * ln_g + r / x * g_prime / g - b_prime / b - c * r * (b_prime * g - b * g_prime) / (g * g);

        let u = b * x / g;
        let u_prime = (b_prime * x + b) / g - b * x * g_prime / (g * g);
        let v = 0.5 * beta * c * c * u * u;
        let v_prime = beta * c * c * u * u_prime;

        let l = 0.5 * beta * c * b / (g * g);
        let l_prime = 0.5 * beta * c * (b_prime / (g * g) - 2.0 * b * g_prime / (g * g * g));

        let t = self.prior.f(x) - 0.5 * x * i_bar + v * self.p_y;
        let t_prime = self.prior.f_prime(x) - 0.5 * i_bar - 0.5 * x * i_bar_prime + v_prime * self.p_y;

        ScalarValues {
            x,
            b,
            g,
            i_bar,
            v,
            l,
            t,
            b_prime,
            g_prime,
            i_bar_prime,
            v_prime,
            l_prime,
            t_prime,
        }
    }

    pub fn g(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.g)
    }

    pub fn i_bar(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.i_bar)
    }

    pub fn v(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.v)
    }

    pub fn l(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.l)
    }

    pub fn t(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.t)
    }

    pub fn b_prime(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.b_prime)
    }

    pub fn l_prime(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.l_prime)
    }

    pub fn t_prime(&self, x: f64) -> Result<f64> {
        Ok(self.eval(x)?.t_prime)
    }

    pub fn nu1(&self, x: f64, y: f64) -> Result<f64> {
        let s = self.eval(x)?;
        let ModelParams { rate: r, beta, sigma2 } = self.params;
        Ok(beta * r / s.g - beta * beta * r * sigma2 * s.b * y / (s.g * s.g) + 1.0 / sigma2)
    }

    pub fn nu2(&self, x: f64) -> Result<f64> {
        let s = self.eval(x)?;
        Ok(self.params.beta * self.params.rate / s.g + 1.0 / self.params.sigma2)
    }

    /// `α(x, y) = 1/(ν₁(x,y) ν₂(x))`; fails if `ν₁ ≤ 0`.
    pub fn alpha(&self, x: f64, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("alpha needs y in [0,1], got {y}")));
        }
        let nu1 = self.nu1(x, y)?;
        if nu1 <= 0.0 {
            return Err(Error::Domain(format!("nu1({x}, {y}) = {nu1} is not positive")));
        }
        Ok(1.0 / (nu1 * self.nu2(x)?))
    }

    /// Two-pattern analogue `α(m_s, m_r, m_sr)` used by the cross term of the
    /// posterior overlap; reduces to `α(x, y)` when `m_s = m_r = x`, `m_sr = y`.
    pub fn alpha3(&self, m_s: f64, m_r: f64, m_sr: f64) -> Result<f64> {
        let ss = self.eval(m_s)?;
        let sr = self.eval(m_r)?;
        let ModelParams { rate: r, beta, sigma2 } = self.params;
        let eta = beta * r / sr.g + 1.0 / sigma2;
        let psi = beta * r / sr.g - beta * beta * sigma2 * r * ss.b * m_sr / (ss.g * sr.g) + 1.0 / sigma2;
        if psi <= 0.0 {
            return Err(Error::Domain(format!(
                "overlap term non-positive at ({m_s}, {m_r}, {m_sr})"
            )));
        }
        Ok(1.0 / (eta * psi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ctx(r: f64, beta: f64, sigma2: f64, p: f64) -> ScalarContext {
        ScalarContext::new(
            ModelParams::new(r, beta, sigma2).unwrap(),
            SparsityPrior::iid_bernoulli(p).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn b_at_x_equal_rate() {
        let c = ctx(0.5, 1.0, 1.0, 0.1);
        assert!((c.b(0.5).unwrap() - (3f64.sqrt() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn b_large_beta_limit() {
        let c = ctx(0.3, 1e6, 1.0, 0.1);
        assert!((c.b(0.8).unwrap() - 0.625).abs() < 1e-4);
    }

    #[test]
    fn b_rejects_nonpositive_x() {
        let c = ctx(0.3, 10.0, 1.0, 0.1);
        assert!(c.b(0.0).is_err());
        assert!(c.b(-0.1).is_err());
        assert!((c.b_total(0.0).unwrap() - 1.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn quadratic_residual_and_identity() {
        let mut rng = crate::rng::stream(1, 0);
        for _ in 0..200 {
            let r = rng.random_range(0.05..1.5);
            let beta = 10f64.powf(rng.random_range(-3.0..6.0));
            let s2 = rng.random_range(0.2..3.0);
            let x = rng.random_range(1e-3..1.0);
            let c = ctx(r, beta, s2, 0.2);
            let b = c.b(x).unwrap();
            let k = beta * s2;
            assert!(b > 0.0 && b < 1.0);
            let resid = k * x * b * b + (1.0 + k * (r - x)) * b - 1.0;
            let scale = 1.0 + k * x * b * b + (1.0 + k * (r - x)).abs() * b;
            assert!(resid.abs() < 1e-12 * scale, "resid {resid}");
            let g = c.g(x).unwrap();
            assert!(g >= 1.0);
            let ident = g * b + k * (r - x) * b - 1.0;
            assert!(ident.abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn b_decreases_in_beta_and_increases_in_x() {
        for &x in &[0.1, 0.3, 0.7] {
            let mut prev = f64::INFINITY;
            for k in 0..40 {
                let beta = 10f64.powf(-2.0 + 0.2 * k as f64);
                let b = ctx(0.3, beta, 1.0, 0.1).b(x).unwrap();
                assert!(b < prev);
                prev = b;
            }
        }
        let c = ctx(0.3, 5.0, 2.0, 0.1);
        assert!(c.b_prime(0.5).unwrap() > 0.0);
        let grid: Vec<f64> = (1..=1000).map(|i| c.b(i as f64 / 1000.0).unwrap()).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_snr_limits() {
        let c = ctx(0.3, 1e-10, 1.0, 0.1);
        for &x in &[0.1, 0.5, 1.0] {
            let s = c.eval(x).unwrap();
            assert!((s.g - 1.0).abs() < 1e-6);
            assert!(s.i_bar.abs() < 1e-6);
            assert!(s.v.abs() < 1e-6);
            assert!(s.l.abs() < 1e-6);
            assert!((s.t_prime - (0.1f64 / 0.9).ln()).abs() < 1e-6);
            assert!((c.alpha(x, 0.3).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn alpha_compositions() {
        let c = ctx(0.3, 10.0, 1.0, 0.1);
        let nu2 = c.nu2(0.3).unwrap();
        assert!((c.alpha(0.3, 0.0).unwrap() - 1.0 / (nu2 * nu2)).abs() < 1e-15);
        let composed = 1.0 / (c.nu1(0.3, 0.2).unwrap() * c.nu2(0.3).unwrap());
        assert!((c.alpha(0.3, 0.2).unwrap() - composed).abs() < 1e-15);
        assert!((c.alpha3(0.3, 0.3, 0.2).unwrap() - c.alpha(0.3, 0.2).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = crate::rng::stream(2, 0);
        let h = 1e-6;
        for _ in 0..100 {
            let r = rng.random_range(0.1..1.0);
            let beta = 10f64.powf(rng.random_range(-1.0..3.0));
            let s2 = rng.random_range(0.5..2.0);
            let x = rng.random_range(0.05..0.95);
            let c = ctx(r, beta, s2, 0.15);
            let s = c.eval(x).unwrap();
            let lo = c.eval(x - h).unwrap();
            let hi = c.eval(x + h).unwrap();
            let pairs = [
                (s.b_prime, hi.b - lo.b),
                (s.g_prime, hi.g - lo.g),
                (s.i_bar_prime, hi.i_bar - lo.i_bar),
                (s.v_prime, hi.v - lo.v),
                (s.l_prime, hi.l - lo.l),
                (s.t_prime, hi.t - lo.t),
            ];
            for (i, (analytic, diff)) in pairs.into_iter().enumerate() {
                let fd = diff / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(1e-3);
                assert!(
                    rel < 1e-5,
                    "derivative {i} at x={x}, R={r}, beta={beta}: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn p_y_matches_definition() {
        let c = ctx(0.3, 10.0, 2.0, 0.1);
        assert_eq!(c.p_y, c.m_a * 2.0 * 0.3 + 0.3 / 10.0);
        assert!((c.m_a - 0.1).abs() < 1e-12);
    }
}
