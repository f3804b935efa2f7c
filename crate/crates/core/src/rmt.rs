//! Empirical checks of the deterministic equivalents behind the asymptotic
//! formula, and the finite-n version of the fixed-point system.
//!
//! Each check draws `H` with i.i.d. `N(0, 1/n)` entries (or `±1/√n`), fixes
//! support patterns with prescribed magnetizations, and compares a random
//! matrix functional with its nonrandom equivalent:
//!
//! | functional | equivalent |
//! |---|---|
//! | `(1/n) tr A_s⁻¹` | `σ² m_s b(m_s)` |
//! | `(1/n) ln det(βσ² H_sᵀH_s + I)` | `m_s Ī(m_s)` |
//! | `(1/n) yᵀH_s A_s⁻¹ H_sᵀy` | `f_n` |
//! | `(1/n) yᵀH_s A_s⁻¹ Q_{s∩r} A_r⁻¹ H_rᵀy` | `q_n` |
//!
//! with `A_s = β H_sᵀH_s + σ⁻² I`. The signal behind `y` is drawn from the
//! prior independently of the fixed patterns.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact::{draw_matrix, measurements, overlap_matrix, Ensemble};
use crate::model::{sample_support, ModelParams, SparsityPrior, SupportPattern};
use crate::quadrature::EmpiricalQ;
use crate::scalar::ScalarContext;
use crate::solver::{solve_with, FixedPointSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmtCheck {
    pub empirical: f64,
    pub equivalent: f64,
    /// `|empirical − equivalent|`.
    pub gap: f64,
}

impl RmtCheck {
    fn new(empirical: f64, equivalent: f64) -> Self {
        RmtCheck {
            empirical,
            equivalent,
            gap: (empirical - equivalent).abs(),
        }
    }

    /// `gap / (1 + |empirical|)`, the scale used by the acceptance thresholds.
    pub fn scaled_gap(&self) -> f64 {
        self.gap / (1.0 + self.empirical.abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmtReport {
    pub n: usize,
    pub k: usize,
    pub m_s: f64,
    pub m_r: f64,
    pub m_sr: f64,
    pub seed: u64,
    pub stieltjes: RmtCheck,
    pub shannon: RmtCheck,
    pub f_n: RmtCheck,
    pub q_n: RmtCheck,
}

/// Patterns with `⌊n m_s⌋` and `⌊n m_r⌋` ones sharing `⌊n m_sr⌋` of them.
pub fn overlapping_patterns(n: usize, m_s: f64, m_r: f64, m_sr: f64) -> Result<(SupportPattern, SupportPattern)> {
    for (name, v) in [("m_s", m_s), ("m_r", m_r), ("m_sr", m_sr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Infeasible(format!("{name} = {v} outside [0,1]")));
        }
    }
    if m_sr > m_s.min(m_r) + 1e-12 || m_s + m_r - m_sr > 1.0 + 1e-12 {
        return Err(Error::Infeasible(format!("(m_s, m_r, m_sr) = ({m_s}, {m_r}, {m_sr})")));
    }
    let count = |m: f64| ((n as f64 * m) + 1e-9).floor() as usize;
    let (cs, cr, csr) = (count(m_s), count(m_r), count(m_sr));
    let cr_only = cr.saturating_sub(csr);
    if cs + cr_only > n {
        return Err(Error::Infeasible(format!("cannot place patterns at n = {n}")));
    }
    let s = SupportPattern::new((0..n).map(|i| i < cs).collect());
    // r shares the last csr ones of s and continues right after it.
    let r = SupportPattern::new(
        (0..n)
            .map(|i| (i + csr >= cs && i < cs) || (i >= cs && i < cs + cr_only))
            .collect(),
    );
    Ok((s, r))
}

struct Draw {
    h: DMatrix<f64>,
    y: DVector<f64>,
}

fn draw(ctx: &ScalarContext, n: usize, ensemble: Ensemble, seed: u64) -> Draw {
    let mut rng = crate::rng::stream(seed, 0);
    let ModelParams { rate, beta, sigma2 } = ctx.params;
    let k = measurements(n, rate);
    let h = draw_matrix(k, n, ensemble, &mut rng);
    let support = sample_support(&ctx.prior, n, &mut rng);
    let x = DVector::from_iterator(
        n,
        support.bits().iter().map(|&on| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if on {
                sigma2.sqrt() * z
            } else {
                0.0
            }
        }),
    );
    let w = DVector::from_fn(k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z / beta.sqrt()
    });
    let y = &h * x + w;
    Draw { h, y }
}

struct PatternSolve {
    /// `H_sᵀ y`.
    z: DVector<f64>,
    /// `A_s⁻¹ H_sᵀ y`.
    v: DVector<f64>,
    trace_inv: f64,
    log_det: f64,
}

fn pattern_solve(d: &Draw, s: &SupportPattern, params: &ModelParams, with_trace: bool) -> Result<PatternSolve> {
    let idx = s.support();
    if idx.is_empty() {
        return Ok(PatternSolve {
            z: DVector::zeros(0),
            v: DVector::zeros(0),
            trace_inv: 0.0,
            log_det: 0.0,
        });
    }
    // An explicit transpose lets the product go through the blocked gemm path.
    let hst = d.h.select_columns(&idx).transpose();
    let size = idx.len();
    let a = (&hst * hst.transpose()) * params.beta + DMatrix::identity(size, size) / params.sigma2;
    let chol = Cholesky::new(a).ok_or_else(|| Error::LinearAlgebra("ridge matrix not positive definite".into()))?;
    let z = &hst * &d.y;
    let v = chol.solve(&z);
    let log_det_a: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    // tr A⁻¹ = ‖L⁻¹‖²_F.
    let trace_inv = if with_trace {
        let mut linv = DMatrix::identity(size, size);
        chol.l().solve_lower_triangular_mut(&mut linv);
        linv.norm_squared()
    } else {
        f64::NAN
    };
    Ok(PatternSolve {
        z,
        v,
        trace_inv,
        log_det: size as f64 * params.sigma2.ln() + log_det_a,
    })
}

fn realized(s: &SupportPattern) -> f64 {
    s.magnetization()
}

fn stieltjes_eq(ctx: &ScalarContext, m: f64) -> Result<f64> {
    Ok(if m == 0.0 {
        0.0
    } else {
        ctx.params.sigma2 * m * ctx.b(m)?
    })
}

fn shannon_eq(ctx: &ScalarContext, m: f64) -> Result<f64> {
    Ok(if m == 0.0 { 0.0 } else { m * ctx.i_bar(m)? })
}

fn fn_eq(ctx: &ScalarContext, m: f64, d: &Draw, ps: &PatternSolve) -> Result<f64> {
    if m == 0.0 {
        return Ok(0.0);
    }
    let ModelParams { beta, sigma2, .. } = ctx.params;
    let s = ctx.eval(m)?;
    let n = d.h.ncols() as f64;
    Ok(
        beta * sigma2 * sigma2 * s.b * s.b * m * m / (s.g * s.g) * d.y.norm_squared() / n
            + sigma2 * s.b / (s.g * s.g) * ps.z.norm_squared() / n,
    )
}

#[allow(clippy::too_many_arguments)]
fn qn_eq(
    ctx: &ScalarContext,
    (m_s, m_r, m_sr): (f64, f64, f64),
    d: &Draw,
    s: &SupportPattern,
    r: &SupportPattern,
    ps: &PatternSolve,
    pr: &PatternSolve,
) -> Result<f64> {
    if m_sr == 0.0 || m_s == 0.0 || m_r == 0.0 {
        return Ok(0.0);
    }
    let ModelParams { beta, sigma2, .. } = ctx.params;
    let n = d.h.ncols() as f64;
    let (es, er) = (ctx.eval(m_s)?, ctx.eval(m_r)?);
    let alpha = ctx.alpha3(m_s, m_r, m_sr)?;
    let corr = d.h.tr_mul(&d.y);
    let cross: f64 = s
        .bits()
        .iter()
        .zip(r.bits())
        .enumerate()
        .filter(|(_, (&a, &b))| a && b)
        .map(|(j, _)| corr[j] * corr[j])
        .sum::<f64>()
        / n;
    let pre = alpha / (es.g * er.g);
    let (zr2, zs2, y2) = (pr.z.norm_squared() / n, ps.z.norm_squared() / n, d.y.norm_squared() / n);
    Ok(
        pre * cross - pre * beta * sigma2 * m_sr * (er.b / er.g * zr2 + es.b / es.g * zs2)
            + pre * beta * sigma2 * m_sr * (er.b / er.g * m_r + es.b / es.g * m_s) * y2,
    )
}

fn single(ctx: &ScalarContext, n: usize, m_s: f64, seed: u64) -> Result<(Draw, SupportPattern, PatternSolve)> {
    let (s, _) = overlapping_patterns(n, m_s, 0.0, 0.0)?;
    let d = draw(ctx, n, Ensemble::Gaussian, seed);
    let ps = pattern_solve(&d, &s, &ctx.params, true)?;
    Ok((d, s, ps))
}

pub fn check_stieltjes(n: usize, m_s: f64, ctx: &ScalarContext, seed: u64) -> Result<RmtCheck> {
    let (_, s, ps) = single(ctx, n, m_s, seed)?;
    Ok(RmtCheck::new(ps.trace_inv / n as f64, stieltjes_eq(ctx, realized(&s))?))
}

pub fn check_shannon(n: usize, m_s: f64, ctx: &ScalarContext, seed: u64) -> Result<RmtCheck> {
    let (_, s, ps) = single(ctx, n, m_s, seed)?;
    Ok(RmtCheck::new(ps.log_det / n as f64, shannon_eq(ctx, realized(&s))?))
}

pub fn check_fn(n: usize, m_s: f64, ctx: &ScalarContext, seed: u64) -> Result<RmtCheck> {
    let (d, s, ps) = single(ctx, n, m_s, seed)?;
    Ok(RmtCheck::new(
        ps.z.dot(&ps.v) / n as f64,
        fn_eq(ctx, realized(&s), &d, &ps)?,
    ))
}

fn qn_empirical(n: usize, s: &SupportPattern, r: &SupportPattern, ps: &PatternSolve, pr: &PatternSolve) -> Result<f64> {
    if ps.v.is_empty() || pr.v.is_empty() {
        return Ok(0.0);
    }
    let q = overlap_matrix(s, r)?;
    Ok((ps.v.transpose() * q * &pr.v)[(0, 0)] / n as f64)
}

pub fn check_qn(n: usize, m_s: f64, m_r: f64, m_sr: f64, ctx: &ScalarContext, seed: u64) -> Result<RmtCheck> {
    Ok(rmt_report(n, m_s, m_r, m_sr, ctx, seed, Ensemble::Gaussian)?.q_n)
}

/// All four checks on one draw of `(H, y)`.
pub fn rmt_report(
    n: usize,
    m_s: f64,
    m_r: f64,
    m_sr: f64,
    ctx: &ScalarContext,
    seed: u64,
    ensemble: Ensemble,
) -> Result<RmtReport> {
    let (s, r) = overlapping_patterns(n, m_s, m_r, m_sr)?;
    let d = draw(ctx, n, ensemble, seed);
    let ps = pattern_solve(&d, &s, &ctx.params, true)?;
    let pr = if r == s {
        None
    } else {
        Some(pattern_solve(&d, &r, &ctx.params, false)?)
    };
    let pr_ref = pr.as_ref().unwrap_or(&ps);
    let nn = n as f64;
    let (ms, mr) = (realized(&s), realized(&r));
    let msr = s.bits().iter().zip(r.bits()).filter(|(&a, &b)| a && b).count() as f64 / nn;
    Ok(RmtReport {
        n,
        k: d.h.nrows(),
        m_s,
        m_r,
        m_sr,
        seed,
        stieltjes: RmtCheck::new(ps.trace_inv / nn, stieltjes_eq(ctx, ms)?),
        shannon: RmtCheck::new(ps.log_det / nn, shannon_eq(ctx, ms)?),
        f_n: RmtCheck::new(ps.z.dot(&ps.v) / nn, fn_eq(ctx, ms, &d, &ps)?),
        q_n: RmtCheck::new(
            qn_empirical(n, &s, &r, &ps, pr_ref)?,
            qn_eq(ctx, (ms, mr, msr), &d, &s, &r, &ps, pr_ref)?,
        ),
    })
}

/// Finite-n fixed point: `m°_n`, `γ°_n` and the moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalSaddle {
    pub m: f64,
    pub gamma: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
    pub solutions: Vec<FixedPointSolution>,
}

/// Solves the fixed-point system with every mixture expectation replaced by
/// an average over `q_i = yᵀh_i` and `P_y` replaced by `‖y‖²/n`.
pub fn empirical_saddle(
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    prior: &SparsityPrior,
    params: &ModelParams,
    cfg: &SolverConfig,
) -> Result<EmpiricalSaddle> {
    if h.nrows() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "H has {} rows, y has {}",
            h.nrows(),
            y.len()
        )));
    }
    let n = h.ncols() as f64;
    let ctx = ScalarContext::new(*params, prior.clone())?.with_p_y(y.norm_squared() / n);
    let corr = h.tr_mul(y);
    let e = EmpiricalQ {
        q2: corr.iter().map(|q| q * q).collect(),
    };
    let solutions = solve_with(&ctx, &e, cfg)?;
    let best = &solutions[0];
    Ok(EmpiricalSaddle {
        m: best.m_star,
        gamma: best.gamma_star,
        rho1: best.rho1,
        rho2: best.rho2,
        rho3: best.rho3,
        solutions,
    })
}

/// Convenience: draw a model instance and solve its empirical system.
pub fn empirical_saddle_seeded(
    prior: &SparsityPrior,
    params: &ModelParams,
    n: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<EmpiricalSaddle> {
    let ctx = ScalarContext::new(*params, prior.clone())?;
    let d = draw(&ctx, n, Ensemble::Gaussian, seed);
    empirical_saddle(&d.y, &d.h, prior, params, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::j2;

    fn ctx(r: f64, beta: f64, p: f64) -> ScalarContext {
        ScalarContext::new(
            ModelParams::new(r, beta, 1.0).unwrap(),
            SparsityPrior::iid_bernoulli(p).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn pattern_construction() {
        let (s, r) = overlapping_patterns(10, 0.3, 0.3, 0.2).unwrap();
        assert_eq!(s.count(), 3);
        assert_eq!(r.count(), 3);
        let common = s.bits().iter().zip(r.bits()).filter(|(&a, &b)| a && b).count();
        assert_eq!(common, 2);
        assert!(matches!(
            overlapping_patterns(10, 0.3, 0.3, 0.4),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            overlapping_patterns(10, 0.7, 0.6, 0.1),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn empty_pattern_and_zero_snr() {
        let c = ctx(0.5, 10.0, 0.2);
        let st = check_stieltjes(200, 0.0, &c, 1).unwrap();
        assert_eq!((st.empirical, st.equivalent), (0.0, 0.0));
        let sh = check_shannon(200, 0.0, &c, 1).unwrap();
        assert_eq!((sh.empirical, sh.equivalent), (0.0, 0.0));

        let c0 = ctx(0.5, 1e-12, 0.2);
        let st = check_stieltjes(200, 0.3, &c0, 1).unwrap();
        assert!((st.empirical - 0.3).abs() < 1e-9 && (st.equivalent - 0.3).abs() < 1e-9);
        let sh = check_shannon(200, 0.3, &c0, 1).unwrap();
        assert!(sh.empirical.abs() < 1e-9 && sh.equivalent.abs() < 1e-9);
    }

    #[test]
    fn qn_without_overlap_vanishes() {
        let c = ctx(0.5, 5.0, 0.2);
        let q = check_qn(200, 0.3, 0.3, 0.0, &c, 4).unwrap();
        assert_eq!(q.empirical, 0.0);
        assert_eq!(q.equivalent, 0.0);
    }

    #[test]
    fn qn_on_identical_patterns_matches_j2() {
        let c = ctx(0.5, 5.0, 0.2);
        let n = 60;
        let rep = rmt_report(n, 0.3, 0.3, 0.3, &c, 8, Ensemble::Gaussian).unwrap();
        let d = draw(&c, n, Ensemble::Gaussian, 8);
        let (s, _) = overlapping_patterns(n, 0.3, 0.3, 0.3).unwrap();
        let j = j2(&d.y, &d.h, &s, &s, &c.params).unwrap();
        assert!((rep.q_n.empirical - j / 25.0).abs() < 1e-12 * j.abs().max(1.0));
        assert!((rep.f_n.empirical - check_fn(n, 0.3, &c, 8).unwrap().empirical).abs() < 1e-14);
    }

    #[test]
    fn same_seed_same_values() {
        let c = ctx(0.5, 5.0, 0.2);
        assert_eq!(check_fn(300, 0.2, &c, 3).unwrap(), check_fn(300, 0.2, &c, 3).unwrap());
    }

    #[test]
    fn moderate_size_gaps_are_small() {
        let c = ctx(0.5, 10.0, 0.2);
        let rep = rmt_report(1000, 0.3, 0.3, 0.2, &c, 11, Ensemble::Gaussian).unwrap();
        assert!(rep.stieltjes.gap < 5e-3, "{:?}", rep.stieltjes);
        assert!(rep.shannon.gap / rep.shannon.equivalent < 0.02, "{:?}", rep.shannon);
        assert!(rep.f_n.scaled_gap() < 0.02, "{:?}", rep.f_n);
        assert!(rep.q_n.scaled_gap() < 0.02, "{:?}", rep.q_n);
        let rad = rmt_report(1000, 0.3, 0.3, 0.2, &c, 11, Ensemble::Rademacher).unwrap();
        assert!(rad.stieltjes.gap < 5e-3 && rad.shannon.scaled_gap() < 0.02);
    }

    #[test]
    fn correlation_second_moment_matches_mixture() {
        let c = ctx(0.3, 10.0, 0.1);
        let n = 1000;
        let vals: Vec<f64> = (0..20)
            .map(|seed| {
                let d = draw(&c, n, Ensemble::Gaussian, 500 + seed);
                d.h.tr_mul(&d.y).iter().map(|q| q * q).sum::<f64>() / n as f64
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0 / 20.0).sqrt();
        let want = crate::quadrature::MixtureQ::from_context(&c).unwrap().second_moment();
        // E|yᵀh_i|² carries an extra O(1/n) term from h_iᵀh_i fluctuations.
        assert!(
            (mean - want).abs() < 3.0 * se + 2.0 * want / n as f64,
            "{mean} vs {want} (se {se})"
        );
    }

    #[test]
    fn empirical_saddle_is_a_valid_magnetization() {
        let prior = SparsityPrior::iid_bernoulli(0.1).unwrap();
        let params = ModelParams::new(0.3, 10.0, 1.0).unwrap();
        let sad = empirical_saddle_seeded(&prior, &params, 400, 2, &SolverConfig::default()).unwrap();
        assert!(sad.m > 0.0 && sad.m < 1.0);
        assert!(sad.rho2 <= sad.m + 1e-12 && sad.rho3 <= sad.rho1 + 1e-15);
    }
}
