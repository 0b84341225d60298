//! Data-driven prior centering.
//!
//! The targets `γ_D = log|𝓛(S)|`, `F_D = ‖𝔻(𝓛(S))‖_F²` and
//! `F_L = ‖⌊𝓛(S)⌋‖_F²` come from the Cholesky factor of the sample covariance.
//! Each diagonal entry of `D_i` gets a `Gamma(a_i, rate_i)` prior with
//!
//! * `rate_i = exp(ψ(a_i) − γ_D/(2 d1 d2))`, which makes `E log|D₁⊗D₂| = γ_D`;
//! * `a_i` solving `a² + a = c_i exp(2ψ(a))` with
//!   `c_i = √F_D / d_i · exp(−γ_D/(d1 d2))`, which makes `E‖D_i‖_F² = √F_D`
//!   and hence `E‖D₁⊗D₂‖_F² = F_D`.
//!
//! The ratio `g(a) = (a² + a)/exp(2ψ(a))` is `E X²/exp(2 E log X)` for a Gamma
//! variable, so it decreases from `+∞` to `1` and a root exists only when
//! `c_i > 1`. For `c_i ≤ 1` the infimum of `|a² + a − c exp(2ψ(a))|` is
//! approached as `a → 0⁺`, and [`solve_a`] returns that boundary point.

use crate::error::{Error, Result};
use crate::geometry::{cholesky_dense, CholFactor};
use nalgebra::DMatrix;

/// Default absolute tolerance on `|a² + a − c exp(2ψ(a))|`.
pub const SHAPE_TOL: f64 = 1e-10;

/// Digamma without argument checking. Returns NaN for `x ≤ 0`.
pub(crate) fn psi(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let z = 1.0 / (x * x);
    // Bernoulli terms B_2k / (2k x^2k), k = 1..7
    let series = z
        * (1.0 / 12.0
            - z * (1.0 / 120.0
                - z * (1.0 / 252.0
                    - z * (1.0 / 240.0 - z * (1.0 / 132.0 - z * (691.0 / 32760.0 - z / 12.0))))));
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma `ψ'(x)`. Returns NaN for `x ≤ 0`.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let z = 1.0 / (x * x);
    let series = 1.0 / 6.0
        - z * (1.0 / 30.0
            - z * (1.0 / 42.0 - z * (1.0 / 30.0 - z * (5.0 / 66.0 - z * (691.0 / 2730.0 - z * 7.0 / 6.0)))));
    acc + 1.0 / x + 0.5 * z + series * z / x
}

/// `ψ₀(x)`, accurate to about 1e-13 absolute for moderate `x`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!("digamma argument {x} must be positive and finite")));
    }
    Ok(psi(x))
}

/// `a² + a − c exp(2ψ(a))`.
pub fn shape_residual(a: f64, c: f64) -> f64 {
    a * a + a - c * (2.0 * psi(a)).exp()
}

/// `(a² + a)/exp(2ψ(a))`, the value of `c` for which `a` is the root.
pub fn shape_ratio(a: f64) -> f64 {
    (a * a + a) / (2.0 * psi(a)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// A genuine root of the shape equation.
    Root,
    /// `c ≤ 1`: no root exists and `a` is the small-shape boundary point.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSolution {
    pub a: f64,
    /// `|a² + a − c exp(2ψ(a))|` at `a`.
    pub residual: f64,
    pub kind: ShapeKind,
    pub iterations: usize,
}

impl ShapeSolution {
    pub fn converged(&self, tol: f64) -> bool {
        self.residual < tol
    }
}

const BRACKET_LO: f64 = 1e-8;
const BRACKET_HI_START: f64 = 10.0;
const BRACKET_HI_MAX: f64 = 1e12;
const MAX_ITER: usize = 500;

/// Solves `a² + a = c exp(2ψ(a))` with bisection safeguarding Newton steps on
/// `log g(a) − log c`. The best iterate is kept, so the reported residual never
/// increases with the iteration budget. When `f64` cancellation makes `tol`
/// unreachable (`c` very close to 1 forces `a` large) the best iterate is
/// returned and [`ShapeSolution::converged`] is false.
pub fn solve_a(c: f64, tol: f64) -> Result<ShapeSolution> {
    solve_a_with_budget(c, tol, MAX_ITER)
}

pub fn solve_a_with_budget(c: f64, tol: f64, max_iter: usize) -> Result<ShapeSolution> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("shape constant c = {c} must be positive")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    if c <= 1.0 {
        return Ok(boundary_solution(c, tol, max_iter));
    }

    let lo0 = BRACKET_LO;
    let mut hi = BRACKET_HI_START;
    while shape_ratio(hi) > c {
        hi *= 10.0;
        if hi > BRACKET_HI_MAX {
            return Err(Error::BracketNotFound { c, lo: lo0, hi: BRACKET_HI_MAX });
        }
    }
    if shape_ratio(lo0) < c {
        return Err(Error::BracketNotFound { c, lo: lo0, hi });
    }

    let mut lo = lo0;
    let phi = |a: f64| (a * a + a).ln() - 2.0 * psi(a) - c.ln();
    let mut a = (lo * hi).sqrt();
    let mut best = ShapeSolution { a, residual: shape_residual(a, c).abs(), kind: ShapeKind::Root, iterations: 0 };
    for it in 1..=max_iter {
        let p = phi(a);
        // phi is decreasing, positive left of the root
        if p > 0.0 {
            lo = a;
        } else {
            hi = a;
        }
        let dp = (2.0 * a + 1.0) / (a * a + a) - 2.0 * trigamma(a);
        let newton = a - p / dp;
        a = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else if hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        let r = shape_residual(a, c).abs();
        if r < best.residual {
            best = ShapeSolution { a, residual: r, kind: ShapeKind::Root, iterations: it };
        }
        if best.residual < tol || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(best)
}

/// For `c ≤ 1`, `f(a) = a² + a − c exp(2ψ(a))` is positive and behaves like `a`
/// near zero. Bisect for `f(a) = tol/2`.
fn boundary_solution(c: f64, tol: f64, max_iter: usize) -> ShapeSolution {
    let target = 0.5 * tol;
    let (mut lo, mut hi) = (0.0_f64, tol);
    let mut a = 0.5 * tol;
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        a = 0.5 * (lo + hi);
        iterations = it;
        if shape_residual(a, c) > target {
            hi = a;
        } else {
            lo = a;
        }
        if hi - lo <= 1e-3 * hi {
            break;
        }
    }
    ShapeSolution { a, residual: shape_residual(a, c).abs(), kind: ShapeKind::Boundary, iterations }
}

/// Centering constants derived from a sample covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTargets {
    pub gamma_d: f64,
    pub f_d: f64,
    pub f_l: f64,
    /// `d1(d1−1) / (d2(d2−1))`.
    pub c: f64,
    /// `d1(d1−1)/2`.
    pub m1: f64,
    pub d1: usize,
    pub d2: usize,
}

impl PriorTargets {
    pub fn new(gamma_d: f64, f_d: f64, f_l: f64, d1: usize, d2: usize) -> Result<Self> {
        if d1 < 2 || d2 < 2 {
            return Err(Error::InvalidArgument(format!(
                "both mode dimensions must be at least 2 (got d1={d1}, d2={d2})"
            )));
        }
        if !(f_d > 0.0) || !(f_l >= 0.0) || !gamma_d.is_finite() || !f_d.is_finite() || !f_l.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid targets gamma_D={gamma_d}, F_D={f_d}, F_L={f_l}"
            )));
        }
        let (a, b) = (d1 as f64, d2 as f64);
        Ok(Self {
            gamma_d,
            f_d,
            f_l,
            c: a * (a - 1.0) / (b * (b - 1.0)),
            m1: a * (a - 1.0) / 2.0,
            d1,
            d2,
        })
    }

    pub fn from_cholesky(l: &CholFactor, d1: usize, d2: usize) -> Result<Self> {
        if l.dim() != d1 * d2 {
            return Err(crate::error::dim_mismatch(format!(
                "factor of dim {} for d1*d2 = {}",
                l.dim(),
                d1 * d2
            )));
        }
        Self::new(l.log_det(), l.diag().norm_squared(), l.strict_lower().norm_squared(), d1, d2)
    }

    pub fn dim(&self) -> usize {
        self.d1 * self.d2
    }

    /// `d2(d2−1)/2`.
    pub fn m2(&self) -> f64 {
        self.m1 / self.c
    }

    /// Shape constant `c_i` for mode `i ∈ {1, 2}`.
    pub fn shape_constant(&self, mode: usize) -> f64 {
        let d_i = if mode == 1 { self.d1 } else { self.d2 } as f64;
        self.f_d.sqrt() / d_i * (-self.gamma_d / self.dim() as f64).exp()
    }
}

/// Targets from the Cholesky factor of the sample covariance `s`. No jitter
/// is ever added.
pub fn prior_targets_from_sample(s: &DMatrix<f64>, d1: usize, d2: usize) -> Result<PriorTargets> {
    if s.nrows() != d1 * d2 {
        return Err(crate::error::dim_mismatch(format!(
            "sample covariance is {}x{}, expected {}x{}",
            s.nrows(),
            s.ncols(),
            d1 * d2,
            d1 * d2
        )));
    }
    let l = cholesky_dense(s).map_err(|e| match e {
        Error::NotPositiveDefinite { minor, pivot } => Error::InvalidArgument(format!(
            "sample covariance is not positive definite (leading minor {minor}, pivot {pivot:e}); \
             it is likely rank deficient, add explicit jitter or collect more observations"
        )),
        other => other,
    })?;
    PriorTargets::from_cholesky(&l, d1, d2)
}

/// Nonnegative root of `√F_D M1 (1 + 1/c) β + (M1²/c) β² = F_L`.
pub fn solve_beta(t: &PriorTargets) -> Result<f64> {
    let qa = t.m1 * t.m1 / t.c;
    let qb = t.m1 * t.f_d.sqrt() * (1.0 + 1.0 / t.c);
    let disc = qb * qb + 4.0 * qa * t.f_l;
    if !(disc >= 0.0) || !(qa > 0.0) {
        return Err(Error::InvalidArgument(format!("beta quadratic has discriminant {disc}")));
    }
    // rationalized root, stable when F_L is small
    let beta = 2.0 * t.f_l / (qb + disc.sqrt());
    Ok(beta)
}

/// `exp(ψ(a) − γ_D/(2 d1 d2))`.
pub fn diag_prior_rate(a: f64, gamma_d: f64, d1: usize, d2: usize) -> Result<f64> {
    Ok(diag_prior_log_rate(a, gamma_d, d1, d2)?.exp())
}

/// `ψ(a) − γ_D/(2 d1 d2)`. Stays finite on a boundary shape, where the rate
/// itself underflows to 0.
pub fn diag_prior_log_rate(a: f64, gamma_d: f64, d1: usize, d2: usize) -> Result<f64> {
    Ok(digamma(a)? - gamma_d / (2.0 * (d1 * d2) as f64))
}

/// Solved hyperparameters for both diagonal priors and the lower variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolvedHyper {
    pub a1: f64,
    pub a2: f64,
    pub rate1: f64,
    pub rate2: f64,
    pub log_rate1: f64,
    pub log_rate2: f64,
    pub beta: f64,
    /// Largest shape-equation residual over the two modes.
    pub epsilon_residual: f64,
    pub kind1: ShapeKind,
    pub kind2: ShapeKind,
}

impl SolvedHyper {
    pub fn shape(&self, mode: usize) -> f64 {
        if mode == 1 { self.a1 } else { self.a2 }
    }

    pub fn rate(&self, mode: usize) -> f64 {
        if mode == 1 { self.rate1 } else { self.rate2 }
    }

    pub fn log_rate(&self, mode: usize) -> f64 {
        if mode == 1 { self.log_rate1 } else { self.log_rate2 }
    }
}

pub fn solve_hyper(t: &PriorTargets, tol: f64) -> Result<SolvedHyper> {
    let s1 = solve_a(t.shape_constant(1), tol)?;
    let s2 = solve_a(t.shape_constant(2), tol)?;
    let log_rate1 = diag_prior_log_rate(s1.a, t.gamma_d, t.d1, t.d2)?;
    let log_rate2 = diag_prior_log_rate(s2.a, t.gamma_d, t.d1, t.d2)?;
    Ok(SolvedHyper {
        a1: s1.a,
        a2: s2.a,
        rate1: log_rate1.exp(),
        rate2: log_rate2.exp(),
        log_rate1,
        log_rate2,
        beta: solve_beta(t)?,
        epsilon_residual: s1.residual.max(s2.residual),
        kind1: s1.kind,
        kind2: s2.kind,
    })
}

/// `E‖D_i‖_F²` under the prior, written as `√F_D` plus the correction coming
/// from the shape-equation residual `ε_i = a² + a − c_i exp(2ψ(a))`.
pub fn expected_diag_mode_fro2(t: &PriorTargets, h: &SolvedHyper, mode: usize) -> f64 {
    let a = h.shape(mode);
    let d_i = if mode == 1 { t.d1 } else { t.d2 } as f64;
    let eps = shape_residual(a, t.shape_constant(mode));
    t.f_d.sqrt() + d_i * eps * (t.gamma_d / t.dim() as f64).exp() / (2.0 * psi(a)).exp()
}

/// `E‖D₁⊗D₂‖_F²` under the prior.
pub fn expected_diag_fro2(t: &PriorTargets, h: &SolvedHyper) -> f64 {
    expected_diag_mode_fro2(t, h, 1) * expected_diag_mode_fro2(t, h, 2)
}

/// `E‖⌊L†⌋‖_F²` for fixed weights `omega` with diagonals centered exactly:
/// `√F_D (M1 + M2) β + M1 M2 β² Σ ωᵢ²`. Equals `F_L` only when `omega` is a
/// vertex of the simplex.
pub fn expected_lower_fro2(t: &PriorTargets, beta: f64, omega: &[f64]) -> f64 {
    let w2: f64 = omega.iter().map(|w| w * w).sum();
    t.f_d.sqrt() * (t.m1 + t.m2()) * beta + t.m1 * t.m2() * beta * beta * w2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    // reference values from a 40-digit evaluation
    const PSI_REF: &[(f64, f64)] = &[
        (1e-8, -100000000.57721564845),
        (0.001, -1000.5755719318103005),
        (0.1, -10.423754940411076795),
        (0.5, -1.9635100260214234794),
        (1.0, -0.57721566490153286061),
        (1.5, 0.036489973978576520559),
        (2.5, 0.70315664064524318723),
        (5.999, 1.7059363290792256641),
        (6.0, 1.7061176684318004727),
        (7.25, 1.9104535268837360284),
        (10.0, 2.2517525890667211076),
        (100.0, 4.6001618527380874002),
        (12345.678, 9.4210208207417608869),
    ];
    const TRIGAMMA_REF: &[(f64, f64)] = &[
        (0.1, 101.43329915079275882),
        (0.5, 4.9348022005446793094),
        (1.0, 1.6449340668482264365),
        (2.5, 0.49035775610023486497),
        (7.25, 0.14787923315893216965),
        (100.0, 0.010050166663333571395),
    ];
    const ROOT_REF: &[(f64, f64)] = &[
        (1.5, 4.7916707859564067444),
        (2.0, 2.7598675529447464349),
        (4.0, 1.3460459060619723834),
        (10.0, 0.79717303678809564244),
        (100.0, 0.39458716124195546683),
    ];

    #[test]
    fn digamma_reference_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-14);
        for &(x, v) in PSI_REF {
            let tol = 1e-12 * v.abs().max(1.0);
            assert!((digamma(x).unwrap() - v).abs() < tol, "psi({x})");
        }
        for &(x, v) in TRIGAMMA_REF {
            assert!((trigamma(x) - v).abs() < 1e-12 * v.abs().max(1.0), "trigamma({x})");
        }
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
    }

    #[test]
    fn digamma_bounds_at_ten() {
        let p = digamma(10.0).unwrap();
        let l = 10f64.ln();
        assert!(p > l - 0.1 && p < l - 0.05);
    }

    proptest! {
        #[test]
        fn digamma_recurrence(x in 1e-3..200.0f64) {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            prop_assert!((d - 1.0 / x).abs() < 1e-12 * (1.0 / x).max(1.0));
        }

        #[test]
        fn digamma_within_log_bounds(x in 0.01..1e4f64) {
            let p = digamma(x).unwrap();
            prop_assert!(p > x.ln() - 1.0 / x && p < x.ln() - 0.5 / x);
        }

        #[test]
        fn shape_root_reconstructs_c(c in 1.01..500.0f64) {
            let s = solve_a(c, 1e-10).unwrap();
            prop_assert_eq!(s.kind, ShapeKind::Root);
            prop_assert!(s.residual < 1e-10);
            let back = shape_ratio(s.a);
            prop_assert!((back - c).abs() < 1e-8 * c);
        }

        #[test]
        fn shape_residual_monotone_in_budget(c in 1.05..200.0f64) {
            let mut prev = f64::INFINITY;
            for budget in 0..40 {
                let r = solve_a_with_budget(c, 1e-14, budget).unwrap().residual;
                prop_assert!(r <= prev);
                prev = r;
            }
        }

        #[test]
        fn beta_plug_back(gamma in -5.0..5.0f64, fd in 0.1..100.0f64, fl in 0.0..100.0f64,
                          d1 in 2usize..7, d2 in 2usize..7) {
            let t = PriorTargets::new(gamma, fd, fl, d1, d2).unwrap();
            let b = solve_beta(&t).unwrap();
            prop_assert!(b >= 0.0);
            let lhs = fd.sqrt() * t.m1 * (1.0 + 1.0 / t.c) * b + t.m1 * t.m1 / t.c * b * b;
            prop_assert!((lhs - fl).abs() <= 1e-10 * fl.max(1e-300));
        }
    }

    #[test]
    fn shape_roots_match_reference() {
        for &(c, a) in ROOT_REF {
            let s = solve_a(c, 1e-12).unwrap();
            assert!((s.a - a).abs() < 1e-9 * a, "c = {c}: {} vs {a}", s.a);
        }
        assert!(solve_a(4.0, 1e-10).unwrap().a < solve_a(2.0, 1e-10).unwrap().a);
    }

    #[test]
    fn shape_root_residual_small_at_two() {
        // independent plain bisection with 200 iterations on g(a) = c
        let (mut lo, mut hi) = (1e-8_f64, 1e6_f64);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if shape_ratio(mid) > 2.0 { lo = mid } else { hi = mid }
        }
        let s = solve_a(2.0, 1e-10).unwrap();
        assert!(s.residual < 1e-8);
        assert!((s.a - lo).abs() < 1e-9 * lo);
    }

    #[test]
    fn shape_boundary_below_one() {
        for c in [0.1, 0.5, 1.0] {
            let s = solve_a(c, 1e-8).unwrap();
            assert_eq!(s.kind, ShapeKind::Boundary);
            assert!(s.residual < 1e-8 && s.a > 0.0);
        }
        // the ratio never drops below one, so there is no interior root
        for a in [0.5, 1.0, 10.0, 1e3, 1e5] {
            assert!(shape_ratio(a) > 1.0);
        }
        assert!(solve_a(-1.0, 1e-8).is_err());
    }

    #[test]
    fn shape_near_one_gives_large_shape() {
        let c = 1.0 + 1e-9;
        let s = solve_a(c, 1e-10).unwrap();
        assert_eq!(s.kind, ShapeKind::Root);
        assert!(s.a > 1e8);
        assert_eq!(s.residual, shape_residual(s.a, c).abs());
        // both sides of the equation are ~a², so the residual is only
        // meaningful to about a² times the machine epsilon
        assert!((shape_ratio(s.a) - c).abs() < 1e-6);
    }

    #[test]
    fn targets_for_identity_and_scaling() {
        let t = prior_targets_from_sample(&DMatrix::identity(6, 6), 3, 2).unwrap();
        assert_eq!((t.gamma_d, t.f_d, t.f_l), (0.0, 6.0, 0.0));
        assert_eq!(t.c, 3.0);
        assert_eq!(t.m1, 3.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = crate::testutil::random_spd(&mut rng, 6).into_inner();
        let t = prior_targets_from_sample(&s, 3, 2).unwrap();
        let t4 = prior_targets_from_sample(&(&s * 4.0), 3, 2).unwrap();
        assert!((t4.gamma_d - t.gamma_d - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((t4.f_d - 4.0 * t.f_d).abs() < 1e-10 * t.f_d);
        assert!((t4.f_l - 4.0 * t.f_l).abs() < 1e-10 * t.f_l);
        for mode in [1, 2] {
            assert!((t4.shape_constant(mode) - t.shape_constant(mode)).abs() < 1e-12);
        }

        // direct Cholesky computation
        let l = s.clone().cholesky().unwrap().l();
        let gamma: f64 = l.diagonal().iter().map(|x| x.ln()).sum();
        assert!((t.gamma_d - gamma).abs() < 1e-12);
        assert!((t.f_d - l.diagonal().norm_squared()).abs() < 1e-12 * t.f_d);
        let lower = crate::geometry::strict_lower_part(&l).norm_squared();
        assert!((t.f_l - lower).abs() < 1e-12 * lower);
    }

    #[test]
    fn rank_deficient_sample_is_an_error() {
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let s = &v * v.transpose();
        let err = prior_targets_from_sample(&s, 2, 2).unwrap_err();
        assert!(err.to_string().contains("jitter"));
    }

    #[test]
    fn beta_cases() {
        let t = PriorTargets::new(0.3, 20.0, 0.0, 4, 5).unwrap();
        assert_eq!(solve_beta(&t).unwrap(), 0.0);
        let t = PriorTargets::new(0.0, 20.0, 10.0, 4, 5).unwrap();
        let b = solve_beta(&t).unwrap();
        // textbook root of q_a β² + q_b β − F_L = 0
        let qa = 36.0 / 0.6;
        let qb = 6.0 * 20f64.sqrt() * (1.0 + 1.0 / 0.6);
        let textbook = (-qb + (qb * qb + 4.0 * qa * 10.0).sqrt()) / (2.0 * qa);
        assert!((b - textbook).abs() < 1e-12 * textbook);
        let back = qb * b + qa * b * b;
        assert!((back - 10.0).abs() < 1e-10 * 10.0);
    }

    #[test]
    fn rate_matches_log_expectation() {
        use rand_distr::{Distribution, Gamma};
        let a = 1.7;
        assert!((diag_prior_rate(a, 0.0, 4, 5).unwrap() - digamma(a).unwrap().exp()).abs() < 1e-15);
        let gamma = 3.0;
        let rate = diag_prior_rate(a, gamma, 2, 3).unwrap();
        let dist = Gamma::new(a, 1.0 / rate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 200_000;
        let logs: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng).ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - gamma / 12.0).abs() < 3.0 * (var / n as f64).sqrt());
    }

    #[test]
    fn diagonal_frobenius_centering() {
        use rand_distr::{Distribution, Gamma};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let (d1, d2) = (rng.random_range(2..5), rng.random_range(2..5));
            let d = (d1 * d2) as f64;
            // diagonals spread enough that both shape constants exceed one
            let logs: Vec<f64> = (0..d1 * d2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let gamma: f64 = logs.iter().sum();
            let fd: f64 = logs.iter().map(|x| (2.0 * x).exp()).sum();
            let t = PriorTargets::new(gamma, fd, 1.0, d1, d2).unwrap();
            if t.shape_constant(1) <= 1.01 || t.shape_constant(2) <= 1.01 {
                continue;
            }
            let h = solve_hyper(&t, 1e-10).unwrap();
            let g1 = Gamma::new(h.a1, 1.0 / h.rate1).unwrap();
            let g2 = Gamma::new(h.a2, 1.0 / h.rate2).unwrap();
            let n = 100_000;
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    let s1: f64 = (0..d1).map(|_| g1.sample(&mut rng).powi(2)).sum();
                    let s2: f64 = (0..d2).map(|_| g2.sample(&mut rng).powi(2)).sum();
                    s1 * s2
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = expected_diag_fro2(&t, &h);
            assert!((expect - fd).abs() < 1e-6 * fd);
            assert!((mean - expect).abs() < 3.0 * (var / n as f64).sqrt(), "{mean} vs {expect} (d={d})");
        }
    }
}
