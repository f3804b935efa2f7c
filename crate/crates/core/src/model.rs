//! Channel parameters, exchangeable sparsity priors and support patterns.
//!
//! A prior assigns `P_S(s) ∝ exp(n f(m_s))` where `m_s` is the fraction of ones
//! in the support pattern `s`. The a-priori magnetization `m_a` is the global
//! maximizer of `h₂(m) + f(m)` and is computed once when the prior is built.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{golden_max, ln_factorials, log_sum_exp};

/// Measurement rate `R = k/n`, noise precision `β` and signal variance `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub rate: f64,
    pub beta: f64,
    pub sigma2: f64,
}

impl ModelParams {
    pub fn new(rate: f64, beta: f64, sigma2: f64) -> Result<Self> {
        let p = ModelParams { rate, beta, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("rate", self.rate), ("beta", self.beta), ("sigma2", self.sigma2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        ModelParams { beta, ..*self }
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        ModelParams { rate, ..*self }
    }

    /// `βσ²`, the per-entry signal-to-noise ratio.
    pub fn snr(&self) -> f64 {
        self.beta * self.sigma2
    }
}

/// Binary entropy in nats with `0 ln 0 = 0`.
pub fn binary_entropy(m: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Domain(format!("binary entropy needs m in [0,1], got {m}")));
    }
    Ok(entropy_unchecked(m))
}

fn entropy_unchecked(m: f64) -> f64 {
    let xlnx = |x: f64| if x <= 0.0 { 0.0 } else { x * x.ln() };
    -xlnx(m) - xlnx(1.0 - m)
}

/// Natural cubic spline through uniformly spaced samples of `f` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedFn {
    values: Vec<f64>,
    second: Vec<f64>,
}

impl TabulatedFn {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("values", "need at least two grid points"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values", "grid values must be finite"));
        }
        let n = values.len() - 1;
        let h = 1.0 / n as f64;
        // Natural spline: M_0 = M_n = 0, tridiagonal system for the interior.
        let mut second = vec![0.0; n + 1];
        if n >= 2 {
            let m = n - 1;
            let mut diag = vec![4.0; m];
            let mut rhs: Vec<f64> = (1..n)
                .map(|i| 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h))
                .collect();
            for i in 1..m {
                let w = 1.0 / diag[i - 1];
                diag[i] -= w;
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; m];
            sol[m - 1] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                sol[i] = (rhs[i] - sol[i + 1]) / diag[i];
            }
            second[1..n].copy_from_slice(&sol);
        }
        Ok(TabulatedFn { values, second })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn locate(&self, m: f64) -> (usize, f64, f64) {
        let n = self.values.len() - 1;
        let h = 1.0 / n as f64;
        let x = m.clamp(0.0, 1.0);
        let i = ((x / h).floor() as usize).min(n - 1);
        (i, x - i as f64 * h, h)
    }

    pub fn eval(&self, m: f64) -> f64 {
        let (i, t, h) = self.locate(m);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let a = (h - t) / h;
        let b = t / h;
        a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }

    pub fn derivative(&self, m: f64) -> f64 {
        let (i, t, h) = self.locate(m);
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let a = (h - t) / h;
        let b = t / h;
        (y1 - y0) / h - (3.0 * a * a - 1.0) * h * m0 / 6.0 + (3.0 * b * b - 1.0) * h * m1 / 6.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorKind {
    /// `f(m) = m ln p + (1-m) ln(1-p)`: independent Bernoulli(p) support.
    IidBernoulli {
        p: f64,
    },
    /// `f(m) = a m + b m²/2`.
    CurieWeiss {
        a: f64,
        b: f64,
    },
    Tabulated(TabulatedFn),
}

/// Exchangeable sparsity prior with its cached a-priori magnetization.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPrior {
    kind: PriorKind,
    m_a: f64,
    ambiguous: bool,
}

impl SparsityPrior {
    pub fn iid_bernoulli(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid("p", format!("must lie in (0,1), got {p}")));
        }
        Ok(Self::build(PriorKind::IidBernoulli { p }))
    }

    pub fn curie_weiss(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::invalid("a", "Curie-Weiss coefficients must be finite"));
        }
        Ok(Self::build(PriorKind::CurieWeiss { a, b }))
    }

    /// `f ≡ 0`: every support pattern equally likely.
    pub fn uniform() -> Self {
        Self::build(PriorKind::CurieWeiss { a: 0.0, b: 0.0 })
    }

    pub fn tabulated(values: Vec<f64>) -> Result<Self> {
        Ok(Self::build(PriorKind::Tabulated(TabulatedFn::new(values)?)))
    }

    fn build(kind: PriorKind) -> Self {
        let mut prior = SparsityPrior {
            kind,
            m_a: 0.5,
            ambiguous: false,
        };
        let (m_a, ambiguous) = prior.maximize_objective();
        prior.m_a = m_a;
        prior.ambiguous = ambiguous;
        prior
    }

    pub fn kind(&self) -> &PriorKind {
        &self.kind
    }

    pub fn f(&self, m: f64) -> f64 {
        match &self.kind {
            PriorKind::IidBernoulli { p } => m * p.ln() + (1.0 - m) * (1.0 - p).ln(),
            PriorKind::CurieWeiss { a, b } => a * m + 0.5 * b * m * m,
            PriorKind::Tabulated(t) => t.eval(m),
        }
    }

    pub fn f_prime(&self, m: f64) -> f64 {
        match &self.kind {
            PriorKind::IidBernoulli { p } => (p / (1.0 - p)).ln(),
            PriorKind::CurieWeiss { a, b } => a + b * m,
            PriorKind::Tabulated(t) => t.derivative(m),
        }
    }

    /// The a-priori magnetization `m_a`.
    pub fn m_a(&self) -> f64 {
        self.m_a
    }

    /// Set when two maximizers of `h₂ + f` tie within 1e-9; `m_a` is then the smaller one.
    pub fn is_ambiguous(&self) -> bool {
        self.ambiguous
    }

    /// `(kind, parameter string)` as written into CSV output.
    pub fn describe(&self) -> (&'static str, String) {
        match &self.kind {
            PriorKind::IidBernoulli { p } => ("iid_bernoulli", format!("p={p}")),
            PriorKind::CurieWeiss { a, b } => ("curie_weiss", format!("a={a};b={b}")),
            PriorKind::Tabulated(t) => ("tabulated", format!("grid={}", t.values().len())),
        }
    }

    pub fn iid_p(&self) -> Option<f64> {
        match self.kind {
            PriorKind::IidBernoulli { p } => Some(p),
            _ => None,
        }
    }

    fn objective(&self, m: f64) -> f64 {
        entropy_unchecked(m) + self.f(m)
    }

    fn stationarity(&self, m: f64) -> f64 {
        ((1.0 - m) / m).ln() + self.f_prime(m)
    }

    fn maximize_objective(&self) -> (f64, bool) {
        const GRID: usize = 2000;
        let xs: Vec<f64> = (0..=GRID).map(|i| i as f64 / GRID as f64).collect();
        let vals: Vec<f64> = xs.iter().map(|&m| self.objective(m)).collect();
        let mut candidates = Vec::new();
        for i in 1..GRID {
            if vals[i] >= vals[i - 1] && vals[i] >= vals[i + 1] {
                let (lo, hi) = (xs[i - 1].max(1e-15), xs[i + 1].min(1.0 - 1e-15));
                let mut m = golden_max(|m| self.objective(m), lo, hi, 1e-12);
                // Polish on the stationarity condition; the objective is too flat
                // near its peak for comparisons alone to resolve 1e-12.
                let (glo, ghi) = (self.stationarity(lo), self.stationarity(hi));
                if glo > 0.0 && ghi < 0.0 {
                    if let Some(r) = crate::numeric::brent(|x| self.stationarity(x), lo, hi, 1e-15, 200) {
                        m = r;
                    }
                }
                candidates.push((m, self.objective(m)));
            }
        }
        if candidates.is_empty() {
            // Monotone objective on the grid cannot happen for finite f'; fall back to the grid argmax.
            let (i, _) = vals.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
            return (xs[i].clamp(1e-12, 1.0 - 1e-12), false);
        }
        candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        candidates.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-9);
        let best = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let near: Vec<&(f64, f64)> = candidates.iter().filter(|c| best - c.1 < 1e-9).collect();
        (near[0].0, near.len() > 1)
    }

    /// Log-probabilities of the support size `c = 0..=n`, i.e. `ln C(n,c) + n f(c/n)` normalized.
    pub fn count_log_distribution(&self, n: usize) -> Vec<f64> {
        let lf = ln_factorials(n);
        let raw: Vec<f64> = (0..=n)
            .map(|c| lf[n] - lf[c] - lf[n - c] + n as f64 * self.f(c as f64 / n as f64))
            .collect();
        let z = log_sum_exp(&raw);
        raw.into_iter().map(|v| v - z).collect()
    }

    /// `ln P_S(s)` for a pattern of `count` ones out of `n`.
    pub fn log_pattern_prob(&self, n: usize, count: usize, log_norm: f64) -> f64 {
        n as f64 * self.f(count as f64 / n as f64) - log_norm
    }

    /// `ln Σ_c C(n,c) exp(n f(c/n))`, the normalizer of `exp(n f(m_s))`.
    pub fn log_normalizer(&self, n: usize) -> f64 {
        let lf = ln_factorials(n);
        let raw: Vec<f64> = (0..=n)
            .map(|c| lf[n] - lf[c] - lf[n - c] + n as f64 * self.f(c as f64 / n as f64))
            .collect();
        log_sum_exp(&raw)
    }
}

/// Binary support pattern of length `n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportPattern {
    bits: Vec<bool>,
}

impl SupportPattern {
    pub fn new(bits: Vec<bool>) -> Self {
        SupportPattern { bits }
    }

    pub fn from_mask(mask: u64, n: usize) -> Self {
        SupportPattern {
            bits: (0..n).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in indices {
            bits[i] = true;
        }
        SupportPattern { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn magnetization(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Indices of the ones, in increasing order.
    pub fn support(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Two-stage draw: support size from the exact count distribution, then a
/// uniformly random subset of that size.
pub fn sample_support<R: Rng + ?Sized>(prior: &SparsityPrior, n: usize, rng: &mut R) -> SupportPattern {
    let logp = prior.count_log_distribution(n);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut count = n;
    for (c, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            count = c;
            break;
        }
    }
    let chosen = index::sample(rng, n, count).into_vec();
    SupportPattern::from_indices(n, &chosen)
}

/// Seeded convenience wrapper around [`sample_support`].
pub fn sample_support_seeded(prior: &SparsityPrior, n: usize, seed: u64) -> SupportPattern {
    let mut rng = crate::rng::stream(seed, 0);
    sample_support(prior, n, &mut rng)
}
