//! Exact finite-n Bayesian computations by enumerating every support.
//!
//! Given a support `s`, the signal restricted to it is Gaussian a posteriori
//! with precision `A_s = β H_sᵀH_s + σ⁻² I` and mean `x̂_s = β A_s⁻¹ H_sᵀ y`.
//! The evidence ratio of `s` against the empty support is
//!
//! ```text
//! ξ(s) = exp(½ β yᵀH_s x̂_s) / det(βσ² H_sᵀH_s + I)^{1/2}
//! ```
//!
//! so that `μ(s | y, H) ∝ P_S(s) ξ(s)`. The MMSE per component of one
//! instance is `E_μ[J₁] − E_{μ×μ}[J₂]` with
//! `J₁(s) = (tr A_s⁻¹ + ‖x̂_s‖²)/n` and `J₂(s, r) = x̂_sᵀ Q_{s∩r} x̂_r / n`.
//! Embedding each `x̂_s` into `ℝⁿ` turns `Q_{s∩r}` into the identity on the
//! common coordinates, so the double sum collapses to `‖Σ_s μ(s) x̂_s‖²/n`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_support, ModelParams, SparsityPrior, SupportPattern};
use crate::numeric::log_sum_exp;

/// Default bound on `n` for full enumeration.
pub const ENUMERATION_CAP: usize = 20;

/// Distribution of the sensing-matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ensemble {
    /// i.i.d. `N(0, 1/n)`.
    #[default]
    Gaussian,
    /// i.i.d. `±1/√n`.
    Rademacher,
    /// All zeros; the observation carries no information about the signal.
    Zero,
}

/// One draw `(H, s, x, w, y)` with `y = H x + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub n: usize,
    pub k: usize,
    pub h: DMatrix<f64>,
    pub s_true: SupportPattern,
    pub x: DVector<f64>,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
    pub seed: u64,
    pub params: ModelParams,
}

pub fn measurements(n: usize, rate: f64) -> usize {
    (rate * n as f64).round() as usize
}

pub fn draw_matrix<R: Rng + ?Sized>(k: usize, n: usize, ensemble: Ensemble, rng: &mut R) -> DMatrix<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    match ensemble {
        Ensemble::Gaussian => DMatrix::from_fn(k, n, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        }),
        Ensemble::Rademacher => DMatrix::from_fn(k, n, |_, _| if rng.random::<bool>() { scale } else { -scale }),
        Ensemble::Zero => DMatrix::zeros(k, n),
    }
}

impl Instance {
    /// Draws `H`, then `s`, then `u`, then unit noise scaled by `β^{-1/2}`, in that order.
    pub fn generate<R: Rng + ?Sized>(
        prior: &SparsityPrior,
        params: &ModelParams,
        n: usize,
        ensemble: Ensemble,
        rng: &mut R,
    ) -> Result<Self> {
        params.validate()?;
        if n == 0 {
            return Err(Error::invalid("n", "must be at least 1"));
        }
        let k = measurements(n, params.rate);
        let h = draw_matrix(k, n, ensemble, rng);
        let s_true = sample_support(prior, n, rng);
        let sd = params.sigma2.sqrt();
        let x = DVector::from_iterator(
            n,
            s_true.bits().iter().map(|&on| {
                let z: f64 = StandardNormal.sample(rng);
                if on {
                    sd * z
                } else {
                    0.0
                }
            }),
        );
        let noise_sd = 1.0 / params.beta.sqrt();
        let w = DVector::from_fn(k, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            noise_sd * z
        });
        let y = &h * &x + &w;
        Ok(Instance {
            n,
            k,
            h,
            s_true,
            x,
            w,
            y,
            seed: 0,
            params: *params,
        })
    }

    pub fn generate_seeded(
        prior: &SparsityPrior,
        params: &ModelParams,
        n: usize,
        ensemble: Ensemble,
        seed: u64,
        stream: u64,
    ) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, stream);
        let mut inst = Self::generate(prior, params, n, ensemble, &mut rng)?;
        inst.seed = seed;
        Ok(inst)
    }

    /// Text dump: a header line, then CSV blocks `H`, `s`, `x`, `w`, `y`,
    /// each introduced by a line holding only the block name.
    pub fn to_text(&self) -> String {
        let row = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let mut out = format!(
            "# n={} k={} seed={} R={} beta={} sigma2={}\nH\n",
            self.n, self.k, self.seed, self.params.rate, self.params.beta, self.params.sigma2
        );
        for i in 0..self.k {
            out += &row(&mut (0..self.n).map(|j| format!("{}", self.h[(i, j)])));
            out.push('\n');
        }
        out += "s\n";
        out += &row(&mut self.s_true.bits().iter().map(|&b| (b as u8).to_string()));
        for (name, v) in [("x", &self.x), ("w", &self.w), ("y", &self.y)] {
            out += &format!("\n{name}\n");
            out += &row(&mut v.iter().map(|x| format!("{x}")));
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(msg.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty instance dump"))?;
        let field = |key: &str| -> Result<&str> {
            header
                .split_whitespace()
                .find_map(|t| t.strip_prefix(&format!("{key}=")))
                .ok_or_else(|| bad(&format!("header lacks {key}")))
        };
        let num = |key: &str| -> Result<f64> { field(key)?.parse().map_err(|_| bad(&format!("bad {key}"))) };
        let n: usize = field("n")?.parse().map_err(|_| bad("bad n"))?;
        let k: usize = field("k")?.parse().map_err(|_| bad("bad k"))?;
        let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed"))?;
        let params = ModelParams::new(num("R")?, num("beta")?, num("sigma2")?)?;
        let parse_row = |l: &str| -> Result<Vec<f64>> {
            if l.is_empty() {
                return Ok(Vec::new());
            }
            l.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad("bad number")))
                .collect()
        };
        let mut expect = |name: &str| -> Result<()> {
            (lines.next() == Some(name))
                .then_some(())
                .ok_or_else(|| bad(&format!("missing block {name}")))
        };
        expect("H")?;
        let mut rows = Vec::with_capacity(k);
        for _ in 0..k {
            let r = parse_row(lines.next().ok_or_else(|| bad("short H block"))?)?;
            if r.len() != n {
                return Err(bad("H row length"));
            }
            rows.extend(r);
        }
        let h = DMatrix::from_row_slice(k, n, &rows);
        let mut rest = Vec::new();
        for name in ["s", "x", "w", "y"] {
            if lines.next() != Some(name) {
                return Err(bad(&format!("missing block {name}")));
            }
            rest.push(parse_row(lines.next().unwrap_or(""))?);
        }
        let s_true = SupportPattern::new(rest[0].iter().map(|&v| v != 0.0).collect());
        let (x, w, y) = (
            DVector::from_vec(rest[1].clone()),
            DVector::from_vec(rest[2].clone()),
            DVector::from_vec(rest[3].clone()),
        );
        if s_true.len() != n || x.len() != n || w.len() != k || y.len() != k {
            return Err(bad("block lengths disagree with header"));
        }
        Ok(Instance {
            n,
            k,
            h,
            s_true,
            x,
            w,
            y,
            seed,
            params,
        })
    }
}

/// `Q_{s∩r}`: a `|S| × |R|` 0/1 matrix mapping positions within `r` to positions within `s`.
pub fn overlap_matrix(s: &SupportPattern, r: &SupportPattern) -> Result<DMatrix<f64>> {
    if s.len() != r.len() {
        return Err(Error::LengthMismatch(format!(
            "patterns of length {} and {}",
            s.len(),
            r.len()
        )));
    }
    let mut q = DMatrix::zeros(s.count(), r.count());
    let (mut is, mut ir) = (0usize, 0usize);
    for (&a, &b) in s.bits().iter().zip(r.bits()) {
        if a && b {
            q[(is, ir)] = 1.0;
        }
        is += a as usize;
        ir += b as usize;
    }
    Ok(q)
}

fn check_dims(y: &DVector<f64>, h: &DMatrix<f64>, n: usize) -> Result<()> {
    if h.nrows() != y.len() || h.ncols() != n {
        return Err(Error::LengthMismatch(format!(
            "H is {}x{}, y has {} entries, pattern has {}",
            h.nrows(),
            h.ncols(),
            y.len(),
            n
        )));
    }
    Ok(())
}

fn columns(h: &DMatrix<f64>, s: &SupportPattern) -> DMatrix<f64> {
    let idx = s.support();
    DMatrix::from_fn(h.nrows(), idx.len(), |i, j| h[(i, idx[j])])
}

struct SupportSolve {
    chol: Cholesky<f64, Dyn>,
    mean: DVector<f64>,
    log_det_a: f64,
}

fn solve_support(a: DMatrix<f64>, z: DVector<f64>, beta: f64) -> Result<SupportSolve> {
    let chol = Cholesky::new(a).ok_or_else(|| Error::LinearAlgebra("ridge matrix not positive definite".into()))?;
    let log_det_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mean = chol.solve(&z) * beta;
    Ok(SupportSolve { chol, mean, log_det_a })
}

/// Direct evaluation from `H_s`, used as the reference for the enumerator.
fn direct(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    s: &SupportPattern,
    params: &ModelParams,
) -> Result<Option<SupportSolve>> {
    check_dims(y, h, s.len())?;
    if s.count() == 0 {
        return Ok(None);
    }
    let hs = columns(h, s);
    let size = hs.ncols();
    let a = hs.transpose() * &hs * params.beta + DMatrix::identity(size, size) / params.sigma2;
    Ok(Some(solve_support(a, hs.transpose() * y, params.beta)?))
}

/// `ln ξ(y, H_s)`; zero for the empty support.
pub fn log_xi(y: &DVector<f64>, h: &DMatrix<f64>, s: &SupportPattern, params: &ModelParams) -> Result<f64> {
    let Some(sol) = direct(y, h, s, params)? else {
        return Ok(0.0);
    };
    let z = columns(h, s).transpose() * y;
    Ok(0.5 * params.beta * z.dot(&sol.mean) - 0.5 * (s.count() as f64 * params.sigma2.ln() + sol.log_det_a))
}

/// `J₁ = (1/n) tr A_s⁻¹ + (1/n) ‖x̂_s‖²`.
pub fn j1(y: &DVector<f64>, h: &DMatrix<f64>, s: &SupportPattern, params: &ModelParams) -> Result<f64> {
    let Some(sol) = direct(y, h, s, params)? else {
        return Ok(0.0);
    };
    let tr = sol.chol.inverse().trace();
    Ok((tr + sol.mean.norm_squared()) / s.len() as f64)
}

/// `J₂ = (β²/n) yᵀ H_s A_s⁻¹ Q_{s∩r} A_r⁻¹ H_rᵀ y`, evaluated literally.
pub fn j2(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    s: &SupportPattern,
    r: &SupportPattern,
    params: &ModelParams,
) -> Result<f64> {
    let q = overlap_matrix(s, r)?;
    let (Some(a), Some(b)) = (direct(y, h, s, params)?, direct(y, h, r, params)?) else {
        return Ok(0.0);
    };
    Ok((a.mean.transpose() * q * b.mean)[(0, 0)] / s.len() as f64)
}

/// Per-support quantities for one pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportStats {
    pub pattern: SupportPattern,
    pub log_xi: f64,
    pub j1: f64,
}

pub fn support_stats(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    s: &SupportPattern,
    params: &ModelParams,
) -> Result<SupportStats> {
    Ok(SupportStats {
        pattern: s.clone(),
        log_xi: log_xi(y, h, s, params)?,
        j1: j1(y, h, s, params)?,
    })
}

/// Shared state for enumerating supports of one instance.
struct Enumerator<'a> {
    n: usize,
    gram: DMatrix<f64>,
    z: DVector<f64>,
    params: &'a ModelParams,
    log_prior: Vec<f64>,
}

struct PatternEval {
    log_weight: f64,
    j1: f64,
    mean: Vec<(usize, f64)>,
    /// `A_s⁻¹` and its support, only when the full covariance is requested.
    cov: Option<DMatrix<f64>>,
    support: Vec<usize>,
}

impl<'a> Enumerator<'a> {
    fn new(
        y: &DVector<f64>,
        h: &DMatrix<f64>,
        prior: &SparsityPrior,
        params: &'a ModelParams,
        cap: usize,
    ) -> Result<Self> {
        let n = h.ncols();
        check_dims(y, h, n)?;
        if n > cap || n >= 63 {
            return Err(Error::EnumerationCap { n, cap });
        }
        let log_norm = prior.log_normalizer(n);
        let log_prior = (0..=n).map(|c| prior.log_pattern_prob(n, c, log_norm)).collect();
        Ok(Enumerator {
            n,
            gram: h.transpose() * h,
            z: h.transpose() * y,
            params,
            log_prior,
        })
    }

    fn eval(&self, mask: u64, tilt: Option<&DVector<f64>>, want_cov: bool) -> Result<PatternEval> {
        let support: Vec<usize> = (0..self.n).filter(|&i| mask >> i & 1 == 1).collect();
        let size = support.len();
        let lp = self.log_prior[size];
        if size == 0 {
            return Ok(PatternEval {
                log_weight: lp,
                j1: 0.0,
                mean: Vec::new(),
                cov: want_cov.then(|| DMatrix::zeros(0, 0)),
                support,
            });
        }
        let ModelParams { beta, sigma2, .. } = *self.params;
        let a = DMatrix::from_fn(size, size, |i, j| {
            beta * self.gram[(support[i], support[j])] + if i == j { 1.0 / sigma2 } else { 0.0 }
        });
        let zs = DVector::from_fn(size, |i, _| self.z[support[i]]);
        let sol = solve_support(a, zs.clone(), beta)?;
        let log_det = size as f64 * sigma2.ln() + sol.log_det_a;
        let quad = match tilt {
            // ½ bᵀA⁻¹b with b = βz + λ_s.
            Some(lambda) => {
                let b = &zs * beta + DVector::from_fn(size, |i, _| lambda[support[i]]);
                0.5 * b.dot(&sol.chol.solve(&b))
            }
            None => 0.5 * beta * zs.dot(&sol.mean),
        };
        let inv = sol.chol.inverse();
        Ok(PatternEval {
            log_weight: lp + quad - 0.5 * log_det,
            j1: (inv.trace() + sol.mean.norm_squared()) / self.n as f64,
            mean: support.iter().copied().zip(sol.mean.iter().copied()).collect(),
            cov: want_cov.then_some(inv),
            support,
        })
    }
}

/// Weighted sums over supports with a running log-scale, mergeable in order.
#[derive(Clone)]
struct Accum {
    log_scale: f64,
    weight: f64,
    j1: f64,
    mean: DVector<f64>,
    second: Option<DMatrix<f64>>,
}

impl Accum {
    fn new(n: usize, want_cov: bool) -> Self {
        Accum {
            log_scale: f64::NEG_INFINITY,
            weight: 0.0,
            j1: 0.0,
            mean: DVector::zeros(n),
            second: want_cov.then(|| DMatrix::zeros(n, n)),
        }
    }

    fn rescale(&mut self, new_scale: f64) {
        if new_scale > self.log_scale {
            let f = if self.log_scale == f64::NEG_INFINITY {
                0.0
            } else {
                (self.log_scale - new_scale).exp()
            };
            self.weight *= f;
            self.j1 *= f;
            self.mean *= f;
            if let Some(s) = self.second.as_mut() {
                *s *= f;
            }
            self.log_scale = new_scale;
        }
    }

    fn push(&mut self, e: &PatternEval) {
        self.rescale(e.log_weight);
        let w = (e.log_weight - self.log_scale).exp();
        self.weight += w;
        self.j1 += w * e.j1;
        for &(i, v) in &e.mean {
            self.mean[i] += w * v;
        }
        if let (Some(s), Some(c)) = (self.second.as_mut(), e.cov.as_ref()) {
            for (a, &i) in e.support.iter().enumerate() {
                for (b, &j) in e.support.iter().enumerate() {
                    s[(i, j)] += w * (c[(a, b)] + e.mean[a].1 * e.mean[b].1);
                }
            }
        }
    }

    fn merge(mut self, mut other: Accum) -> Accum {
        let scale = self.log_scale.max(other.log_scale);
        if scale == f64::NEG_INFINITY {
            return self;
        }
        self.rescale(scale);
        other.rescale(scale);
        self.weight += other.weight;
        self.j1 += other.j1;
        self.mean += other.mean;
        if let (Some(a), Some(b)) = (self.second.as_mut(), other.second) {
            *a += b;
        }
        self
    }
}

const BLOCK: u64 = 1024;

fn accumulate(en: &Enumerator, tilt: Option<&DVector<f64>>, want_cov: bool) -> Result<Accum> {
    let total = 1u64 << en.n;
    let blocks: Vec<u64> = (0..total.div_ceil(BLOCK)).collect();
    let parts: Vec<Accum> = blocks
        .par_iter()
        .map(|&b| {
            let mut acc = Accum::new(en.n, want_cov);
            for mask in b * BLOCK..((b + 1) * BLOCK).min(total) {
                acc.push(&en.eval(mask, tilt, want_cov)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    // Ordered fold keeps the result independent of thread scheduling.
    Ok(parts.into_iter().fold(Accum::new(en.n, want_cov), Accum::merge))
}

/// Posterior over all `2ⁿ` supports, indexed by bit mask (bit `i` = component `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub n: usize,
    pub probs: Vec<f64>,
}

impl Posterior {
    pub fn prob(&self, s: &SupportPattern) -> f64 {
        let mask = s
            .bits()
            .iter()
            .enumerate()
            .fold(0u64, |m, (i, &b)| m | ((b as u64) << i));
        self.probs[mask as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (SupportPattern, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(move |(mask, &p)| (SupportPattern::from_mask(mask as u64, self.n), p))
    }
}

pub fn posterior(y: &DVector<f64>, h: &DMatrix<f64>, prior: &SparsityPrior, params: &ModelParams) -> Result<Posterior> {
    posterior_with_cap(y, h, prior, params, ENUMERATION_CAP)
}

pub fn posterior_with_cap(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior: &SparsityPrior,
    params: &ModelParams,
    cap: usize,
) -> Result<Posterior> {
    let en = Enumerator::new(y, h, prior, params, cap)?;
    let logs: Vec<f64> = (0..1u64 << en.n)
        .into_par_iter()
        .map(|mask| en.eval(mask, None, false).map(|e| e.log_weight))
        .collect::<Result<_>>()?;
    let z = log_sum_exp(&logs);
    Ok(Posterior {
        n: en.n,
        probs: logs.into_iter().map(|l| (l - z).exp()).collect(),
    })
}

/// `E[X | y, H] = Σ_s μ(s) x̂_s` with each `x̂_s` embedded in `ℝⁿ`.
pub fn conditional_mean(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior: &SparsityPrior,
    params: &ModelParams,
) -> Result<DVector<f64>> {
    let acc = accumulate(&Enumerator::new(y, h, prior, params, ENUMERATION_CAP)?, None, false)?;
    Ok(acc.mean / acc.weight)
}

/// `ln Z(y; λ)` up to a `λ`-independent constant; its gradient at `λ = 0` is the conditional mean.
pub fn log_partition(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior: &SparsityPrior,
    params: &ModelParams,
    lambda: &DVector<f64>,
) -> Result<f64> {
    let en = Enumerator::new(y, h, prior, params, ENUMERATION_CAP)?;
    if lambda.len() != en.n {
        return Err(Error::LengthMismatch(format!(
            "lambda has {} entries, n = {}",
            lambda.len(),
            en.n
        )));
    }
    let acc = accumulate(&en, Some(lambda), false)?;
    Ok(acc.log_scale + acc.weight.ln())
}

/// Posterior summaries of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMmse {
    /// `E_μ[J₁] − E_{μ×μ}[J₂]`.
    pub via_j: f64,
    /// `(1/n) tr Cov(X | y, H)` from the assembled mixture covariance.
    pub via_covariance: Option<f64>,
    pub mean: DVector<f64>,
}

pub fn instance_mmse(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior: &SparsityPrior,
    params: &ModelParams,
    cap: usize,
    with_covariance: bool,
) -> Result<InstanceMmse> {
    let en = Enumerator::new(y, h, prior, params, cap)?;
    let acc = accumulate(&en, None, with_covariance)?;
    let n = en.n as f64;
    let mean = &acc.mean / acc.weight;
    let via_j = acc.j1 / acc.weight - mean.norm_squared() / n;
    let via_covariance = acc.second.map(|s| {
        let cov = s / acc.weight - &mean * mean.transpose();
        cov.trace() / n
    });
    Ok(InstanceMmse {
        via_j,
        via_covariance,
        mean,
    })
}

/// Literal `Σ_{s,r} μ(s) μ(r) J₂(s, r)`, quadratic in the number of supports.
pub fn expected_j2_double_sum(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior: &SparsityPrior,
    params: &ModelParams,
) -> Result<f64> {
    let post = posterior(y, h, prior, params)?;
    let pats: Vec<(SupportPattern, f64)> = post.iter().collect();
    let mut total = 0.0;
    for (s, ps) in &pats {
        for (r, pr) in &pats {
            total += ps * pr * j2(y, h, s, r, params)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub ensemble: Ensemble,
    pub cap: usize,
    /// Also assemble the full posterior covariance to check the `J` identity.
    pub check_identity: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            ensemble: Ensemble::Gaussian,
            cap: ENUMERATION_CAP,
            check_identity: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McResult {
    pub trials: usize,
    /// Mean over instances of `E_μ[J₁] − E_{μ×μ}[J₂]`.
    pub estimate: f64,
    pub std_error: f64,
    /// Mean over instances of `‖x − E[X|y,H]‖² / n`.
    pub direct_estimate: f64,
    pub direct_std_error: f64,
    /// Largest per-instance gap between the `J` route and the covariance trace (0 unless checked).
    pub max_identity_gap: f64,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo average of the exact per-instance MMSE. Trial `i` draws its
/// instance from stream `i` of `seed`.
pub fn mc_mmse(
    prior: &SparsityPrior,
    params: &ModelParams,
    n: usize,
    trials: usize,
    seed: u64,
    opts: &McOptions,
) -> Result<McResult> {
    if trials < 2 {
        return Err(Error::invalid("trials", format!("need at least 2, got {trials}")));
    }
    if n > opts.cap {
        return Err(Error::EnumerationCap { n, cap: opts.cap });
    }
    let per: Vec<(f64, f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let inst = Instance::generate_seeded(prior, params, n, opts.ensemble, seed, t)?;
            let r = instance_mmse(&inst.y, &inst.h, prior, params, opts.cap, opts.check_identity)?;
            let direct = (&inst.x - &r.mean).norm_squared() / n as f64;
            let gap = r.via_covariance.map_or(0.0, |c| (c - r.via_j).abs());
            Ok((r.via_j, direct, gap))
        })
        .collect::<Result<_>>()?;
    let a: Vec<f64> = per.iter().map(|p| p.0).collect();
    let b: Vec<f64> = per.iter().map(|p| p.1).collect();
    let (estimate, std_error) = mean_se(&a);
    let (direct_estimate, direct_std_error) = mean_se(&b);
    Ok(McResult {
        trials,
        estimate,
        std_error,
        direct_estimate,
        direct_std_error,
        max_identity_gap: per.iter().map(|p| p.2).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn p(r: f64, beta: f64) -> ModelParams {
        ModelParams::new(r, beta, 1.0).unwrap()
    }

    fn inst(n: usize, r: f64, beta: f64, pr: f64, seed: u64) -> (Instance, SparsityPrior) {
        let prior = SparsityPrior::iid_bernoulli(pr).unwrap();
        (
            Instance::generate_seeded(&prior, &p(r, beta), n, Ensemble::Gaussian, seed, 0).unwrap(),
            prior,
        )
    }

    #[test]
    fn overlap_example() {
        let s = SupportPattern::new([1, 1, 0, 0, 1, 1].iter().map(|&b| b == 1).collect());
        let r = SupportPattern::new([0, 1, 1, 0, 0, 1].iter().map(|&b| b == 1).collect());
        let q = overlap_matrix(&s, &r).unwrap();
        assert_eq!(q.shape(), (4, 3));
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| q[(i, j)] == 1.0)
            .collect();
        // One-based (2,1) and (4,3).
        assert_eq!(ones, vec![(1, 0), (3, 2)]);
        assert_eq!(overlap_matrix(&s, &s).unwrap(), DMatrix::identity(4, 4));
        let d = SupportPattern::new(vec![true, false, true]);
        let e = SupportPattern::new(vec![false, true, false]);
        assert_eq!(overlap_matrix(&d, &e).unwrap(), DMatrix::zeros(2, 1));
        assert!(overlap_matrix(&d, &s).is_err());
    }

    #[test]
    fn log_xi_empty_and_scalar() {
        let params = p(1.0, 3.0);
        let y = DVector::from_vec(vec![0.7]);
        let h = DMatrix::from_vec(1, 1, vec![0.9]);
        let empty = SupportPattern::new(vec![false]);
        assert_eq!(log_xi(&y, &h, &empty, &params).unwrap(), 0.0);
        let full = SupportPattern::new(vec![true]);
        let (b, s2, hh, yy) = (3.0f64, 1.0f64, 0.81f64, 0.49f64);
        let want = b * b * yy * hh * s2 / (2.0 * (b * s2 * hh + 1.0)) - 0.5 * (b * s2 * hh + 1.0).ln();
        assert!((log_xi(&y, &h, &full, &params).unwrap() - want).abs() < 1e-14);
    }

    /// Tensor Gauss–Legendre over a box, for two-dimensional marginal likelihoods.
    fn integrate_2d<F: Fn(f64, f64) -> f64>(f: F, lim: f64) -> f64 {
        let (x, w) = crate::quadrature::gauss_legendre_nodes(20);
        let panels = 60;
        let h = 2.0 * lim / panels as f64;
        let mut nodes = Vec::new();
        for p in 0..panels {
            let mid = -lim + (p as f64 + 0.5) * h;
            for (xi, wi) in x.iter().zip(&w) {
                nodes.push((mid + 0.5 * h * xi, 0.5 * h * wi));
            }
        }
        let mut total = 0.0;
        for &(a, wa) in &nodes {
            for &(b, wb) in &nodes {
                total += wa * wb * f(a, b);
            }
        }
        total
    }

    fn marginal_likelihood(inst: &Instance, s: &SupportPattern) -> f64 {
        let beta = inst.params.beta;
        let k = inst.k as f64;
        let lik = |x: &DVector<f64>| {
            let r = &inst.y - &inst.h * x;
            (beta / (2.0 * PI)).powf(0.5 * k) * (-0.5 * beta * r.norm_squared()).exp()
        };
        let g = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
        match (s.bits()[0], s.bits()[1]) {
            (false, false) => lik(&DVector::zeros(2)),
            (true, false) => integrate_2d(|a, b| lik(&DVector::from_vec(vec![a, 0.0])) * g(a) * g(b), 10.0),
            (false, true) => integrate_2d(|a, b| lik(&DVector::from_vec(vec![0.0, b])) * g(a) * g(b), 10.0),
            (true, true) => integrate_2d(|a, b| lik(&DVector::from_vec(vec![a, b])) * g(a) * g(b), 10.0),
        }
    }

    #[test]
    fn n2_evidence_and_posterior_match_integration() {
        let (inst, prior) = inst(2, 1.0, 4.0, 0.4, 5);
        let base = (inst.params.beta / (2.0 * PI)).powf(0.5 * inst.k as f64)
            * (-0.5 * inst.params.beta * inst.y.norm_squared()).exp();
        let mut joint = Vec::new();
        for mask in 0..4u64 {
            let s = SupportPattern::from_mask(mask, 2);
            let numeric = marginal_likelihood(&inst, &s);
            let closed = base * log_xi(&inst.y, &inst.h, &s, &inst.params).unwrap().exp();
            assert!(
                (numeric - closed).abs() < 1e-6 * closed,
                "{mask}: {numeric} vs {closed}"
            );
            let c = s.count() as i32;
            joint.push(0.4f64.powi(c) * 0.6f64.powi(2 - c) * numeric);
        }
        let total: f64 = joint.iter().sum();
        let post = posterior(&inst.y, &inst.h, &prior, &inst.params).unwrap();
        for (mask, j) in joint.iter().enumerate() {
            assert!((post.probs[mask] - j / total).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_matrix_j_values() {
        let params = p(0.5, 10.0);
        let h = DMatrix::zeros(3, 6);
        let y = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        let s = SupportPattern::from_mask(0b101101, 6);
        assert!((j1(&y, &h, &s, &params).unwrap() - 4.0 / 6.0).abs() < 1e-14);
        assert_eq!(j2(&y, &h, &s, &s, &params).unwrap(), 0.0);
    }

    #[test]
    fn j2_self_is_scaled_norm() {
        let (inst, _) = inst(6, 0.5, 10.0, 0.3, 2);
        let s = SupportPattern::from_mask(0b011010, 6);
        let hs = columns(&inst.h, &s);
        let a = hs.transpose() * &hs * 10.0 + DMatrix::identity(3, 3);
        let v = a.try_inverse().unwrap() * hs.transpose() * &inst.y;
        let want = 100.0 * v.norm_squared() / 6.0;
        assert!((j2(&inst.y, &inst.h, &s, &s, &inst.params).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn enumerator_matches_direct_formulas() {
        let (inst, prior) = inst(5, 0.6, 7.0, 0.3, 9);
        let en = Enumerator::new(&inst.y, &inst.h, &prior, &inst.params, ENUMERATION_CAP).unwrap();
        for mask in 0..32u64 {
            let s = SupportPattern::from_mask(mask, 5);
            let e = en.eval(mask, None, false).unwrap();
            let lp = prior.log_pattern_prob(5, s.count(), prior.log_normalizer(5));
            assert!((e.log_weight - lp - log_xi(&inst.y, &inst.h, &s, &inst.params).unwrap()).abs() < 1e-11);
            assert!((e.j1 - j1(&inst.y, &inst.h, &s, &inst.params).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_j2_matches_double_sum() {
        for seed in 0..3 {
            let (inst, prior) = inst(6, 0.5, 10.0, 0.3, seed);
            let r = instance_mmse(&inst.y, &inst.h, &prior, &inst.params, ENUMERATION_CAP, false).unwrap();
            let collapsed = r.mean.norm_squared() / 6.0;
            let literal = expected_j2_double_sum(&inst.y, &inst.h, &prior, &inst.params).unwrap();
            assert!((collapsed - literal).abs() < 1e-12, "{collapsed} vs {literal}");
        }
    }

    #[test]
    fn j_route_equals_covariance_trace() {
        for seed in 0..5 {
            let (inst, prior) = inst(8, 0.5, 10.0, 0.2, seed);
            let r = instance_mmse(&inst.y, &inst.h, &prior, &inst.params, ENUMERATION_CAP, true).unwrap();
            assert!((r.via_j - r.via_covariance.unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_normalized_and_prior_at_zero_snr() {
        let (inst, prior) = inst(8, 0.5, 10.0, 0.2, 1);
        let post = posterior(&inst.y, &inst.h, &prior, &inst.params).unwrap();
        assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let params = p(0.5, 1e-12);
        let post0 = posterior(&inst.y, &inst.h, &prior, &params).unwrap();
        let tv: f64 = post0
            .iter()
            .map(|(s, q)| (q - 0.2f64.powi(s.count() as i32) * 0.8f64.powi(8 - s.count() as i32)).abs())
            .sum::<f64>()
            * 0.5;
        assert!(tv < 1e-6);
    }

    #[test]
    fn conditional_mean_limits() {
        let (inst, prior) = inst(6, 0.7, 10.0, 0.3, 4);
        let zero = conditional_mean(&DVector::zeros(inst.k), &inst.h, &prior, &inst.params).unwrap();
        assert!(zero.norm() == 0.0);

        let dense = SparsityPrior::iid_bernoulli(1.0 - 1e-12).unwrap();
        let got = conditional_mean(&inst.y, &inst.h, &dense, &inst.params).unwrap();
        let a = inst.h.transpose() * &inst.h * 10.0 + DMatrix::identity(6, 6);
        let ridge = a.try_inverse().unwrap() * inst.h.transpose() * &inst.y * 10.0;
        assert!((got - ridge).amax() < 1e-9);
    }

    #[test]
    fn gradient_of_log_partition_is_conditional_mean() {
        for seed in 0..3 {
            let (inst, prior) = inst(6, 0.5, 10.0, 0.3, 100 + seed);
            let mean = conditional_mean(&inst.y, &inst.h, &prior, &inst.params).unwrap();
            let lz = |l: &DVector<f64>| log_partition(&inst.y, &inst.h, &prior, &inst.params, l).unwrap();
            for i in 0..6 {
                let mut e = DVector::zeros(6);
                e[i] = 1e-5;
                let fd = (lz(&e) - lz(&(-&e))) / 2e-5;
                assert!((fd - mean[i]).abs() < 1e-6, "coord {i}: {fd} vs {}", mean[i]);
            }
        }
    }

    #[test]
    fn cap_is_enforced() {
        let prior = SparsityPrior::iid_bernoulli(0.2).unwrap();
        let err = mc_mmse(&prior, &p(0.5, 10.0), 21, 2, 0, &McOptions::default()).unwrap_err();
        assert_eq!(err, Error::EnumerationCap { n: 21, cap: 20 });
        let y = DVector::zeros(3);
        let h = DMatrix::zeros(3, 22);
        assert!(posterior(&y, &h, &prior, &p(0.5, 1.0)).is_err());
    }

    #[test]
    fn zero_matrix_recovers_prior_variance() {
        let prior = SparsityPrior::iid_bernoulli(0.3).unwrap();
        let opts = McOptions {
            ensemble: Ensemble::Zero,
            ..McOptions::default()
        };
        let r = mc_mmse(&prior, &p(0.5, 10.0), 6, 4, 3, &opts).unwrap();
        assert!((r.estimate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn per_instance_values_bounded() {
        let prior = SparsityPrior::iid_bernoulli(0.4).unwrap();
        for t in 0..20 {
            let inst = Instance::generate_seeded(&prior, &p(0.5, 30.0), 7, Ensemble::Rademacher, 8, t).unwrap();
            let r = instance_mmse(&inst.y, &inst.h, &prior, &inst.params, ENUMERATION_CAP, false).unwrap();
            assert!(r.via_j >= -1e-12 && r.via_j <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn posterior_concentrates_with_snr() {
        let prior = SparsityPrior::iid_bernoulli(0.2).unwrap();
        let mut wins = 0;
        for t in 0..200 {
            let lo = Instance::generate_seeded(&prior, &p(0.75, 1.0), 10, Ensemble::Gaussian, 77, t).unwrap();
            let hi = Instance::generate_seeded(&prior, &p(0.75, 1e3), 10, Ensemble::Gaussian, 77, t).unwrap();
            assert_eq!(lo.s_true, hi.s_true);
            let a = posterior(&lo.y, &lo.h, &prior, &lo.params).unwrap().prob(&lo.s_true);
            let b = posterior(&hi.y, &hi.h, &prior, &hi.params).unwrap().prob(&hi.s_true);
            wins += (b > a) as usize;
        }
        assert!(wins >= 180, "{wins} of 200");
    }

    #[test]
    fn tower_property() {
        let prior = SparsityPrior::iid_bernoulli(0.3).unwrap();
        let params = p(0.5, 10.0);
        let trials = 400;
        let means: Vec<DVector<f64>> = (0..trials)
            .map(|t| {
                let inst = Instance::generate_seeded(&prior, &params, 6, Ensemble::Gaussian, 12, t).unwrap();
                conditional_mean(&inst.y, &inst.h, &prior, &params).unwrap()
            })
            .collect();
        for i in 0..6 {
            let v: Vec<f64> = means.iter().map(|m| m[i]).collect();
            let (mean, se) = mean_se(&v);
            assert!(mean.abs() < 3.0 * se + 1e-12, "coord {i}: {mean} (se {se})");
        }
    }

    #[test]
    fn text_dump_round_trip() {
        let (inst, _) = inst(5, 0.6, 10.0, 0.3, 31);
        let text = inst.to_text();
        assert!(text.starts_with("# n=5 k=3 seed=31"));
        let back = Instance::from_text(&text).unwrap();
        assert_eq!(back, inst);
        assert!(Instance::from_text("# n=5\nH\n").is_err());
    }

    #[test]
    fn serial_and_parallel_draws_agree() {
        let prior = SparsityPrior::iid_bernoulli(0.2).unwrap();
        let params = p(0.5, 10.0);
        let a = mc_mmse(&prior, &params, 6, 8, 42, &McOptions::default()).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| mc_mmse(&prior, &params, 6, 8, 42, &McOptions::default()).unwrap());
        assert_eq!(a, b);
    }
}
