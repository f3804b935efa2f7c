//! Expectations over the two-component Gaussian mixture `Q` and the kernel
//! `K(q) = ½(1 + tanh((L q² − γ)/2))`.
//!
//! All integrands are even in `q`, so both rules integrate over the half axis
//! and double. At large `β` the kernel is a near step at `q² = γ/L`; the
//! default panel rule puts a breakpoint there and grades panels outward from
//! it, which plain Gauss–Hermite cannot resolve without thousands of nodes.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numeric::half_one_plus_tanh;
use crate::scalar::ScalarContext;

/// `(1 − m_a) N(0, P_y) + m_a N(0, P_y + R²σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureQ {
    pub w0: f64,
    pub w1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl MixtureQ {
    pub fn new(w1: f64, v0: f64, v1: f64) -> Result<Self> {
        if !(w1 > 0.0 && w1 < 1.0) {
            return Err(Error::invalid(
                "w1",
                format!("mixture weight must lie in (0,1), got {w1}"),
            ));
        }
        if !(v0 > 0.0 && v1 > v0 && v1.is_finite()) {
            return Err(Error::invalid("v1", format!("need 0 < v0 < v1, got v0={v0}, v1={v1}")));
        }
        Ok(MixtureQ {
            w0: 1.0 - w1,
            w1,
            v0,
            v1,
        })
    }

    pub fn from_context(ctx: &ScalarContext) -> Result<Self> {
        let p = &ctx.params;
        Self::new(ctx.m_a, ctx.p_y, ctx.p_y + p.rate * p.rate * p.sigma2)
    }

    pub fn second_moment(&self) -> f64 {
        self.w0 * self.v0 + self.w1 * self.v1
    }
}

/// Location of the kernel transition, used to place panel breakpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kink {
    pub l: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum RuleKind {
    GaussHermite {
        nodes: Vec<f64>,
        weights: Vec<f64>,
        doubled: (Vec<f64>, Vec<f64>),
    },
    Panel {
        order: usize,
        base: (Vec<f64>, Vec<f64>),
        doubled: (Vec<f64>, Vec<f64>),
    },
}

/// Quadrature rule for even functions of `Q`, with a node-doubling accuracy check.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    kind: RuleKind,
    pub tolerance: f64,
}

const Z_MAX: f64 = 40.0;

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::panel(16)
    }
}

impl QuadratureRule {
    /// Gauss–Hermite with `n` nodes per component (half of them used, by symmetry).
    pub fn gauss_hermite(n: usize) -> Self {
        let n = n.max(2) + n % 2;
        let (nodes, weights) = gauss_hermite_nodes(n);
        QuadratureRule {
            kind: RuleKind::GaussHermite {
                nodes,
                weights,
                doubled: gauss_hermite_nodes(2 * n),
            },
            tolerance: 1e-10,
        }
    }

    /// Composite Gauss–Legendre of the given order per panel on `z ∈ [0, 40]`.
    pub fn panel(order: usize) -> Self {
        let order = order.max(2);
        QuadratureRule {
            kind: RuleKind::Panel {
                order,
                base: gauss_legendre_nodes(order),
                doubled: gauss_legendre_nodes(2 * order),
            },
            tolerance: 1e-10,
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            RuleKind::GaussHermite { nodes, .. } => format!("gauss_hermite({})", nodes.len()),
            RuleKind::Panel { order, .. } => format!("panel({order})"),
        }
    }

    /// `E_{N(0,v)}[φ(Q²)]` for several outputs at once; `doubled` selects the refined nodes.
    fn component(
        &self,
        v: f64,
        phi: &dyn Fn(f64, &mut [f64]),
        out: &mut [f64],
        kink: Option<Kink>,
        doubled: bool,
        full_axis: bool,
    ) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = vec![0.0; out.len()];
        match &self.kind {
            RuleKind::GaussHermite {
                nodes,
                weights,
                doubled: d,
            } => {
                let (xs, ws) = if doubled { (&d.0, &d.1) } else { (nodes, weights) };
                for (&x, &w) in xs.iter().zip(ws) {
                    if !full_axis && x < 0.0 {
                        continue;
                    }
                    let scale = if full_axis { 1.0 } else { 2.0 };
                    phi(2.0 * v * x * x, &mut buf);
                    for (o, b) in out.iter_mut().zip(&buf) {
                        *o += scale * w * b / PI.sqrt();
                    }
                }
            }
            RuleKind::Panel { base, doubled: d, .. } => {
                let (xs, ws) = if doubled { (&d.0, &d.1) } else { (&base.0, &base.1) };
                let half = breakpoints(v, kink);
                let pts: Vec<f64> = if full_axis {
                    half.iter()
                        .rev()
                        .map(|z| -z)
                        .chain(half.iter().skip(1).copied())
                        .collect()
                } else {
                    half
                };
                let scale = if full_axis { 1.0 } else { 2.0 };
                let norm = scale / (2.0 * PI).sqrt();
                for win in pts.windows(2) {
                    let (a, b) = (win[0], win[1]);
                    let half_w = 0.5 * (b - a);
                    let mid = 0.5 * (a + b);
                    for (&x, &w) in xs.iter().zip(ws) {
                        let z = mid + half_w * x;
                        let dens = norm * (-0.5 * z * z).exp();
                        if dens == 0.0 {
                            continue;
                        }
                        phi(v * z * z, &mut buf);
                        for (o, bv) in out.iter_mut().zip(&buf) {
                            *o += half_w * w * dens * bv;
                        }
                    }
                }
            }
        }
    }

    fn mixture(
        &self,
        mix: &MixtureQ,
        phi: &dyn Fn(f64, &mut [f64]),
        n_out: usize,
        kink: Option<Kink>,
        doubled: bool,
        full_axis: bool,
    ) -> Vec<f64> {
        let mut a = vec![0.0; n_out];
        let mut b = vec![0.0; n_out];
        self.component(mix.v0, phi, &mut a, kink, doubled, full_axis);
        self.component(mix.v1, phi, &mut b, kink, doubled, full_axis);
        a.iter().zip(&b).map(|(x, y)| mix.w0 * x + mix.w1 * y).collect()
    }

    /// Half-axis evaluation without the doubling check.
    pub fn expect_multi(
        &self,
        mix: &MixtureQ,
        phi: &dyn Fn(f64, &mut [f64]),
        n_out: usize,
        kink: Option<Kink>,
    ) -> Vec<f64> {
        self.mixture(mix, phi, n_out, kink, false, false)
    }

    /// Evaluation over the whole real line, for checking the symmetry reduction.
    pub fn expect_full_axis(&self, mix: &MixtureQ, phi: &dyn Fn(f64) -> f64, kink: Option<Kink>) -> f64 {
        self.mixture(mix, &|q2, o: &mut [f64]| o[0] = phi(q2), 1, kink, false, true)[0]
    }

    /// Evaluates with the base and doubled nodes; fails if they disagree beyond tolerance.
    pub fn expect_multi_checked(
        &self,
        mix: &MixtureQ,
        phi: &dyn Fn(f64, &mut [f64]),
        n_out: usize,
        kink: Option<Kink>,
    ) -> Result<Vec<f64>> {
        let coarse = self.mixture(mix, phi, n_out, kink, false, false);
        let fine = self.mixture(mix, phi, n_out, kink, true, false);
        for (c, f) in coarse.iter().zip(&fine) {
            if !f.is_finite() || (c - f).abs() > self.tolerance * f.abs() + 1e-15 {
                return Err(Error::Quadrature(format!(
                    "{}: doubling changed {c} to {f}",
                    self.describe()
                )));
            }
        }
        Ok(fine)
    }

    pub fn expect(&self, mix: &MixtureQ, phi: &dyn Fn(f64) -> f64, kink: Option<Kink>) -> Result<f64> {
        Ok(self.expect_multi_checked(mix, &|q2, o: &mut [f64]| o[0] = phi(q2), 1, kink)?[0])
    }
}

/// Breakpoints on `[0, Z_MAX]` in standardized units: unit panels out to 12,
/// plus panels graded geometrically away from the kernel transition.
fn breakpoints(v: f64, kink: Option<Kink>) -> Vec<f64> {
    let mut pts: Vec<f64> = (0..=12).map(|i| i as f64).collect();
    pts.push(Z_MAX);
    if let Some(Kink { l, gamma }) = kink {
        let lv = l * v;
        if lv > 0.0 && lv.is_finite() {
            let center = (gamma.max(0.0) / lv).sqrt();
            // z-distance over which the tanh argument moves by one unit.
            let width = (center * center + 2.0 / lv).sqrt() - center;
            if center < Z_MAX && width < 1.0 {
                pts.push(center);
                let mut step = width;
                while step < 2.0 {
                    for z in [center - step, center + step] {
                        if z > 0.0 && z < Z_MAX {
                            pts.push(z);
                        }
                    }
                    step *= 1.5;
                }
            }
        }
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
    pts
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Gauss–Hermite nodes and weights for the weight `e^{−x²}`, from the
/// eigen-decomposition of the Jacobi matrix (Golub–Welsch).
pub fn gauss_hermite_nodes(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (0.5 * i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    // Symmetrize to remove eigen-solver noise.
    for k in 0..n / 2 {
        let (x, w) = (
            0.5 * (pairs[k].0 - pairs[n - 1 - k].0),
            0.5 * (pairs[k].1 + pairs[n - 1 - k].1),
        );
        pairs[k] = (x, w);
        pairs[n - 1 - k] = (-x, w);
    }
    pairs.into_iter().unzip()
}

/// `½(1 + tanh((l q² − γ)/2))`, saturating to exactly 0 or 1.
pub fn k_from_l(l: f64, q2: f64, gamma: f64) -> f64 {
    half_one_plus_tanh(l * q2 - gamma)
}

/// The kernel `K(q; m, γ)` with `L` evaluated at `m`.
pub fn k_kernel(ctx: &ScalarContext, q: f64, m: f64, gamma: f64) -> Result<f64> {
    Ok(k_from_l(ctx.l(m)?, q * q, gamma))
}

/// Something that can average functions of `Q²`: the asymptotic mixture or
/// an empirical sample of squared correlations.
pub trait QExpectation: Sync {
    fn expect_multi(&self, phi: &dyn Fn(f64, &mut [f64]), n_out: usize, kink: Option<Kink>) -> Vec<f64>;

    fn expect_multi_checked(
        &self,
        phi: &dyn Fn(f64, &mut [f64]),
        n_out: usize,
        kink: Option<Kink>,
    ) -> Result<Vec<f64>> {
        Ok(self.expect_multi(phi, n_out, kink))
    }

    fn second_moment(&self) -> f64;
}

/// The mixture `Q` paired with a quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExpectation {
    pub mix: MixtureQ,
    pub rule: QuadratureRule,
}

impl QExpectation for MixtureExpectation {
    fn expect_multi(&self, phi: &dyn Fn(f64, &mut [f64]), n_out: usize, kink: Option<Kink>) -> Vec<f64> {
        self.rule.expect_multi(&self.mix, phi, n_out, kink)
    }

    fn expect_multi_checked(
        &self,
        phi: &dyn Fn(f64, &mut [f64]),
        n_out: usize,
        kink: Option<Kink>,
    ) -> Result<Vec<f64>> {
        self.rule.expect_multi_checked(&self.mix, phi, n_out, kink)
    }

    fn second_moment(&self) -> f64 {
        self.mix.second_moment()
    }
}

/// Uniform average over observed values of `Q²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalQ {
    pub q2: Vec<f64>,
}

impl QExpectation for EmpiricalQ {
    fn expect_multi(&self, phi: &dyn Fn(f64, &mut [f64]), n_out: usize, _kink: Option<Kink>) -> Vec<f64> {
        let mut acc = vec![0.0; n_out];
        let mut buf = vec![0.0; n_out];
        for &q2 in &self.q2 {
            phi(q2, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let n = self.q2.len().max(1) as f64;
        acc.into_iter().map(|a| a / n).collect()
    }

    fn second_moment(&self) -> f64 {
        self.q2.iter().sum::<f64>() / self.q2.len().max(1) as f64
    }
}

/// `(ρ₁, ρ₂, ρ₃) = (E[K Q²], E[K²], E[K² Q²])` at `(m, γ)`.
pub fn rho_moments_with<E: QExpectation + ?Sized>(
    ctx: &ScalarContext,
    expectation: &E,
    m: f64,
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    let l = ctx.l(m)?;
    let v = expectation.expect_multi_checked(
        &|q2, o: &mut [f64]| {
            let k = k_from_l(l, q2, gamma);
            o[0] = k * q2;
            o[1] = k * k;
            o[2] = k * k * q2;
        },
        3,
        Some(Kink { l, gamma }),
    )?;
    Ok((v[0], v[1], v[2]))
}

/// `ρ` moments under the asymptotic mixture with the default rule.
pub fn rho_moments(m: f64, gamma: f64, ctx: &ScalarContext) -> Result<(f64, f64, f64)> {
    let e = MixtureExpectation {
        mix: MixtureQ::from_context(ctx)?,
        rule: QuadratureRule::default(),
    };
    rho_moments_with(ctx, &e, m, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelParams, SparsityPrior};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ctx(r: f64, beta: f64, p: f64) -> ScalarContext {
        ScalarContext::new(
            ModelParams::new(r, beta, 1.0).unwrap(),
            SparsityPrior::iid_bernoulli(p).unwrap(),
        )
        .unwrap()
    }

    /// Recursive adaptive Simpson, an integrator independent of the rules above.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec<F: Fn(f64) -> f64>(
            f: &F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    fn mixture_density(mix: &MixtureQ, q: f64) -> f64 {
        let n = |v: f64| (-0.5 * q * q / v).exp() / (2.0 * PI * v).sqrt();
        mix.w0 * n(mix.v0) + mix.w1 * n(mix.v1)
    }

    fn simpson_expect(mix: &MixtureQ, phi: &dyn Fn(f64) -> f64) -> f64 {
        let lim = 40.0 * mix.v1.sqrt();
        // Many starting panels so a sharp step is never missed by the first samples.
        let f = |q: f64| phi(q * q) * mixture_density(mix, q);
        let pieces = 400;
        let h = 2.0 * lim / pieces as f64;
        (0..pieces)
            .map(|i| simpson(&f, -lim + i as f64 * h, -lim + (i + 1) as f64 * h, 1e-14))
            .sum()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_nodes(8);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite_nodes(40);
        let m0: f64 = w.iter().sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - PI.sqrt()).abs() < 1e-13);
        assert!((m4 - 0.75 * PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn normalization_and_second_moment() {
        let c = ctx(0.3, 10.0, 0.1);
        let mix = MixtureQ::from_context(&c).unwrap();
        for rule in [QuadratureRule::default(), QuadratureRule::gauss_hermite(200)] {
            assert!((rule.expect(&mix, &|_| 1.0, None).unwrap() - 1.0).abs() < 1e-10);
            let m2 = rule.expect(&mix, &|q2| q2, None).unwrap();
            assert!((m2 - (c.p_y + 0.1 * 0.09)).abs() < 1e-10);
        }
    }

    #[test]
    fn k_kernel_basics() {
        assert_eq!(k_from_l(2.0, 0.5, 1.0), 0.5);
        assert_eq!(k_from_l(1.0, 1.0, 1e6), 0.0);
        for &u in &[-3.0, 0.2, 5.0] {
            assert!((half_one_plus_tanh(u) + half_one_plus_tanh(-u) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_expectation_matches_adaptive_simpson() {
        let c = ctx(0.3, 10.0, 0.1);
        let mix = MixtureQ::from_context(&c).unwrap();
        let l = c.l(0.3).unwrap();
        let rule = QuadratureRule::default();
        let got = rule
            .expect(&mix, &|q2| k_from_l(l, q2, 1.0), Some(Kink { l, gamma: 1.0 }))
            .unwrap();
        let want = simpson_expect(&mix, &|q2| k_from_l(l, q2, 1.0));
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn sharp_kernel_matches_adaptive_simpson() {
        let c = ctx(0.3, 1e4, 0.1);
        let mix = MixtureQ::from_context(&c).unwrap();
        let l = c.l(0.12).unwrap();
        let gamma = 800.0;
        let rule = QuadratureRule::default();
        let got = rule
            .expect(&mix, &|q2| k_from_l(l, q2, gamma) * q2, Some(Kink { l, gamma }))
            .unwrap();
        let want = simpson_expect(&mix, &|q2| k_from_l(l, q2, gamma) * q2);
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn symmetric_and_full_axis_agree() {
        let c = ctx(0.3, 100.0, 0.1);
        let mix = MixtureQ::from_context(&c).unwrap();
        let l = c.l(0.2).unwrap();
        let kink = Some(Kink { l, gamma: 3.0 });
        let rule = QuadratureRule::default();
        let phi = |q2: f64| k_from_l(l, q2, 3.0) * q2;
        let half = rule.expect_multi(&mix, &|q2, o: &mut [f64]| o[0] = phi(q2), 1, kink)[0];
        let full = rule.expect_full_axis(&mix, &phi, kink);
        assert!((half - full).abs() < 1e-12);
    }

    #[test]
    fn expectation_is_linear_and_positive() {
        let c = ctx(0.5, 3.0, 0.2);
        let mix = MixtureQ::from_context(&c).unwrap();
        let rule = QuadratureRule::default();
        let f = |q2: f64| (-q2).exp();
        let g = |q2: f64| q2.sqrt();
        let ef = rule.expect(&mix, &f, None).unwrap();
        let eg = rule.expect(&mix, &g, None).unwrap();
        let combo = rule.expect(&mix, &|q2| 2.0 * f(q2) - 3.0 * g(q2), None).unwrap();
        assert!((combo - (2.0 * ef - 3.0 * eg)).abs() < 1e-12);
        assert!(ef > 0.0 && eg > 0.0);
    }

    #[test]
    fn rho_moments_match_monte_carlo() {
        let c = ctx(0.3, 100.0, 0.1);
        let mix = MixtureQ::from_context(&c).unwrap();
        let (m, gamma) = (0.12, 20.0);
        let (r1, r2, r3) = rho_moments(m, gamma, &c).unwrap();
        assert!(r3 <= r1);
        let l = c.l(m).unwrap();
        let mut rng = crate::rng::stream(17, 0);
        let draws = 10_000_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..draws {
            let v = if rng.random::<f64>() < mix.w1 { mix.v1 } else { mix.v0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            let q2 = v * z * z;
            let k = k_from_l(l, q2, gamma);
            let vals = [k * q2, k * k, k * k * q2];
            for i in 0..3 {
                sums[i] += vals[i];
                sq[i] += vals[i] * vals[i];
            }
        }
        for (i, want) in [r1, r2, r3].into_iter().enumerate() {
            let mean = sums[i] / draws as f64;
            let se = ((sq[i] / draws as f64 - mean * mean) / draws as f64).sqrt();
            assert!(
                (mean - want).abs() < 3.0 * se,
                "rho{} {mean} vs {want} (se {se})",
                i + 1
            );
        }
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        assert!(MixtureQ::new(0.0, 1.0, 2.0).is_err());
        assert!(MixtureQ::new(0.5, 2.0, 1.0).is_err());
    }
}
