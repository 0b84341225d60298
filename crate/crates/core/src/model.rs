//! The static model.
//!
//! `L† = Σᵢ ⌊L₁⁽ⁱ⁾ ⊗ L₂⁽ⁱ⁾⌋ + D₁ ⊗ D₂` is the Cholesky factor of the
//! precision. Every component shares the diagonals `D₁, D₂`, so
//! `⌊L₁⁽ⁱ⁾ ⊗ L₂⁽ⁱ⁾⌋ = ⌊L₁⁽ⁱ⁾⌋⊗D₂ + D₁⊗⌊L₂⁽ⁱ⁾⌋ + ⌊L₁⁽ⁱ⁾⌋⊗⌊L₂⁽ⁱ⁾⌋`.
//!
//! Writing `L† = Σₘ Pₘ ⊗ Qₘ` over the `1 + 3K` terms above and the scatter as
//! `Σ_q A_q ⊗ B_q`, the quadratic term of the likelihood is
//! `tr(L†L†ᵀ Σ yyᵀ) = Σ_q Σ_{m,m'} ⟨Pₘ, A_q Pₘ'⟩ ⟨Qₘ, B_q Qₘ'⟩`, which only
//! touches `d1 x d1` and `d2 x d2` matrices.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{dim_mismatch, Error, Result};
use crate::geometry::{strict_lower_part, CholFactor};
use crate::hyperprior::{psi, PriorTargets, SolvedHyper};
use crate::kronecker::{pvl_decompose, PvlDecomp};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Parameters of the static model.
#[derive(Debug, Clone, PartialEq)]
pub struct SckpdParams {
    /// Strictly lower `d1 x d1` parts `⌊L₁⁽ⁱ⁾⌋`, one per component.
    pub lowers1: Vec<DMatrix<f64>>,
    /// Strictly lower `d2 x d2` parts `⌊L₂⁽ⁱ⁾⌋`.
    pub lowers2: Vec<DMatrix<f64>>,
    pub d1_diag: DVector<f64>,
    pub d2_diag: DVector<f64>,
    pub omega: DVector<f64>,
    pub theta: f64,
}

impl SckpdParams {
    pub fn d1(&self) -> usize {
        self.d1_diag.len()
    }

    pub fn d2(&self) -> usize {
        self.d2_diag.len()
    }

    pub fn k(&self) -> usize {
        self.omega.len()
    }

    /// All lowers zero, unit diagonals, uniform weights.
    pub fn identity(d1: usize, d2: usize, k: usize) -> Self {
        Self {
            lowers1: vec![DMatrix::zeros(d1, d1); k],
            lowers2: vec![DMatrix::zeros(d2, d2); k],
            d1_diag: DVector::from_element(d1, 1.0),
            d2_diag: DVector::from_element(d2, 1.0),
            omega: DVector::from_element(k, 1.0 / k as f64),
            theta: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d1, d2, k) = (self.d1(), self.d2(), self.k());
        if k == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::InvalidArgument("empty parameter set".into()));
        }
        if self.lowers1.len() != k || self.lowers2.len() != k {
            return Err(dim_mismatch(format!(
                "{} / {} lower factors for {k} weights",
                self.lowers1.len(),
                self.lowers2.len()
            )));
        }
        for (l, d) in self.lowers1.iter().map(|l| (l, d1)).chain(self.lowers2.iter().map(|l| (l, d2))) {
            if l.nrows() != d || l.ncols() != d {
                return Err(dim_mismatch(format!("lower factor is {}x{}, expected {d}x{d}", l.nrows(), l.ncols())));
            }
            if l.upper_triangle().iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidArgument("lower factor has entries on or above the diagonal".into()));
            }
        }
        if self.d1_diag.iter().chain(self.d2_diag.iter()).any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument("diagonal entries must be positive and finite".into()));
        }
        if self.omega.iter().any(|&w| !(w >= 0.0)) || (self.omega.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("omega {:?} is not on the simplex", self.omega.as_slice())));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidArgument(format!("theta = {} outside (0, 1)", self.theta)));
        }
        Ok(())
    }
}

/// Dense `L†`.
pub fn assemble_ldagger(p: &SckpdParams) -> CholFactor {
    let dm1 = DMatrix::from_diagonal(&p.d1_diag);
    let dm2 = DMatrix::from_diagonal(&p.d2_diag);
    let base = dm1.kronecker(&dm2);
    let mut l = base.clone();
    for (l1, l2) in p.lowers1.iter().zip(&p.lowers2) {
        let full = (l1 + &dm1).kronecker(&(l2 + &dm2));
        l += strict_lower_part(&full);
    }
    CholFactor::new(l).expect("positive diagonals give a valid factor")
}

/// `log|L†| = d2 Σ log D₁ + d1 Σ log D₂`.
pub fn log_det_ldagger(p: &SckpdParams) -> f64 {
    p.d2() as f64 * p.d1_diag.iter().map(|x| x.ln()).sum::<f64>()
        + p.d1() as f64 * p.d2_diag.iter().map(|x| x.ln()).sum::<f64>()
}

/// Sufficient statistics of zero-mean observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub scatter_pvl: PvlDecomp,
    pub trace_scatter: f64,
    /// `+1` for a symmetric pair, `-1` for an antisymmetric one, `0` otherwise.
    term_parity: Vec<i8>,
    scatter: DMatrix<f64>,
}

impl DataSummary {
    /// From the scatter matrix `Σ yᵢyᵢᵀ` of `n` observations.
    pub fn from_scatter(scatter: DMatrix<f64>, n: usize, d1: usize, d2: usize) -> Result<Self> {
        let r = d1.min(d2);
        let pvl = pvl_decompose(&scatter, d1, d2, r * r)?;
        let term_parity = pvl
            .terms
            .iter()
            .map(|t| {
                let tol = 1e-12 * (t.a.amax() + t.b.amax()).max(f64::MIN_POSITIVE);
                if (&t.a - t.a.transpose()).amax() < tol && (&t.b - t.b.transpose()).amax() < tol {
                    1
                } else if (&t.a + t.a.transpose()).amax() < tol && (&t.b + t.b.transpose()).amax() < tol {
                    -1
                } else {
                    0
                }
            })
            .collect();
        Ok(Self { n, d1, d2, trace_scatter: scatter.trace(), scatter_pvl: pvl, term_parity, scatter })
    }

    /// From an `n x d1*d2` matrix of observations (one per row), taken as
    /// already centered.
    pub fn from_observations(y: &DMatrix<f64>, d1: usize, d2: usize) -> Result<Self> {
        if y.ncols() != d1 * d2 {
            return Err(dim_mismatch(format!("observations have {} columns, expected {}", y.ncols(), d1 * d2)));
        }
        Self::from_scatter(y.transpose() * y, y.nrows(), d1, d2)
    }

    /// An empty data set: the likelihood contributes nothing.
    pub fn empty(d1: usize, d2: usize) -> Result<Self> {
        Self::from_scatter(DMatrix::zeros(d1 * d2, d1 * d2), 0, d1, d2)
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    /// `Σ yᵢyᵢᵀ / n`.
    pub fn sample_covariance(&self) -> Result<DMatrix<f64>> {
        if self.n == 0 {
            return Err(Error::Empty("no observations"));
        }
        Ok(&self.scatter / self.n as f64)
    }
}

/// Likelihood value and its gradient with respect to the natural parameters.
#[derive(Debug, Clone)]
pub(crate) struct LikGrad {
    pub value: f64,
    pub lowers1: Vec<DMatrix<f64>>,
    pub lowers2: Vec<DMatrix<f64>>,
    pub d1: DVector<f64>,
    pub d2: DVector<f64>,
}

fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `(u, v)` factor indices of the `1 + 3K` Kronecker terms of `L†`. Index 0
/// is the diagonal, `i ≥ 1` the lowers of component `i − 1`.
fn term_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(1 + 3 * k);
    out.push((0, 0));
    for i in 1..=k {
        out.extend([(i, 0), (0, i), (i, i)]);
    }
    out
}

/// Structured `tr(L†L†ᵀ Σyyᵀ)` and, optionally, its gradient with respect to
/// `(lowers1, lowers2, D1, D2)`.
pub(crate) fn trace_quadratic_impl(
    lowers1: &[DMatrix<f64>],
    lowers2: &[DMatrix<f64>],
    d1: &DVector<f64>,
    d2: &DVector<f64>,
    data: &DataSummary,
    want_grad: bool,
) -> (f64, Option<LikGrad>) {
    let k = lowers1.len();
    let mut us = Vec::with_capacity(k + 1);
    us.push(DMatrix::from_diagonal(d1));
    us.extend(lowers1.iter().cloned());
    let mut vs = Vec::with_capacity(k + 1);
    vs.push(DMatrix::from_diagonal(d2));
    vs.extend(lowers2.iter().cloned());
    let pairs = term_pairs(k);
    let nu = k + 1;

    let mut gu = vec![DMatrix::zeros(d1.len(), d1.len()); if want_grad { nu } else { 0 }];
    let mut gv = vec![DMatrix::zeros(d2.len(), d2.len()); if want_grad { nu } else { 0 }];
    let mut total = 0.0;
    let mut g = DMatrix::zeros(nu, nu);
    let mut h = DMatrix::zeros(nu, nu);
    let mut cu = DMatrix::zeros(nu, nu);
    let mut cv = DMatrix::zeros(nu, nu);

    for (term, &parity) in data.scatter_pvl.terms.iter().zip(&data.term_parity) {
        let au: Vec<DMatrix<f64>> = us.iter().map(|u| &term.a * u).collect();
        let bv: Vec<DMatrix<f64>> = vs.iter().map(|v| &term.b * v).collect();
        for i in 0..nu {
            for j in 0..nu {
                g[(i, j)] = frob(&us[i], &au[j]);
                h[(i, j)] = frob(&vs[i], &bv[j]);
            }
        }
        cu.fill(0.0);
        cv.fill(0.0);
        for &(ua, va) in &pairs {
            for &(ub, vb) in &pairs {
                total += g[(ua, ub)] * h[(va, vb)];
                if want_grad {
                    cu[(ua, ub)] += h[(va, vb)];
                    cv[(va, vb)] += g[(ua, ub)];
                }
            }
        }
        if !want_grad {
            continue;
        }
        // d/dU_a ⟨U_a, A U_b⟩ = A U_b and d/dU_b ⟨U_a, A U_b⟩ = Aᵀ U_a
        let (atu, btv): (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) = match parity {
            1 => (au.clone(), bv.clone()),
            -1 => (au.iter().map(|m| -m).collect(), bv.iter().map(|m| -m).collect()),
            _ => (
                us.iter().map(|u| term.a.transpose() * u).collect(),
                vs.iter().map(|v| term.b.transpose() * v).collect(),
            ),
        };
        for a in 0..nu {
            for b in 0..nu {
                if cu[(a, b)] != 0.0 {
                    gu[a] += &au[b] * cu[(a, b)];
                    gu[b] += &atu[a] * cu[(a, b)];
                }
                if cv[(a, b)] != 0.0 {
                    gv[a] += &bv[b] * cv[(a, b)];
                    gv[b] += &btv[a] * cv[(a, b)];
                }
            }
        }
    }
    if !want_grad {
        return (total, None);
    }
    let grad = LikGrad {
        value: total,
        d1: gu[0].diagonal(),
        d2: gv[0].diagonal(),
        lowers1: gu[1..].iter().map(strict_lower_part).collect(),
        lowers2: gv[1..].iter().map(strict_lower_part).collect(),
    };
    (total, Some(grad))
}

/// `tr(L†L†ᵀ Σ yᵢyᵢᵀ)` through the Kronecker expansion of the scatter.
pub fn trace_quadratic(p: &SckpdParams, data: &DataSummary) -> f64 {
    trace_quadratic_impl(&p.lowers1, &p.lowers2, &p.d1_diag, &p.d2_diag, data, false).0
}

/// Log-likelihood and its gradient in the natural parameters.
pub(crate) fn log_likelihood_grad(
    lowers1: &[DMatrix<f64>],
    lowers2: &[DMatrix<f64>],
    d1: &DVector<f64>,
    d2: &DVector<f64>,
    data: &DataSummary,
) -> LikGrad {
    let (tr, g) = trace_quadratic_impl(lowers1, lowers2, d1, d2, data, true);
    let mut g = g.expect("gradient requested");
    let (n1, n2) = (d1.len() as f64, d2.len() as f64);
    let n = data.n as f64;
    let logdet = n2 * d1.iter().map(|x| x.ln()).sum::<f64>() + n1 * d2.iter().map(|x| x.ln()).sum::<f64>();
    g.value = n * logdet - 0.5 * tr - 0.5 * n * n1 * n2 * LN_2PI;
    for m in g.lowers1.iter_mut().chain(g.lowers2.iter_mut()) {
        *m *= -0.5;
    }
    g.d1 = g.d1.zip_map(d1, |gt, x| -0.5 * gt + n * n2 / x);
    g.d2 = g.d2.zip_map(d2, |gt, x| -0.5 * gt + n * n1 / x);
    g
}

/// `n log|L†| − ½ tr(L†L†ᵀ Σyyᵀ) − (n d/2) log 2π`.
pub fn log_likelihood(p: &SckpdParams, data: &DataSummary) -> f64 {
    let n = data.n as f64;
    let d = (p.d1() * p.d2()) as f64;
    n * log_det_ldagger(p) - 0.5 * trace_quadratic(p, data) - 0.5 * n * d * LN_2PI
}

/// `log Gamma(x | shape, rate)`.
pub(crate) fn gamma_logpdf(x: f64, shape: f64, log_rate: f64) -> f64 {
    shape * log_rate - ln_gamma(shape) + (shape - 1.0) * x.ln() - log_rate.exp() * x
}

/// Log density of a symmetric Dirichlet with concentration `theta` given the
/// log weights.
pub(crate) fn dirichlet_logpdf(log_omega: &[f64], theta: f64) -> f64 {
    let k = log_omega.len() as f64;
    ln_gamma(k * theta) - k * ln_gamma(theta) + (theta - 1.0) * log_omega.iter().sum::<f64>()
}

/// Derivative of [`dirichlet_logpdf`] in `theta`.
pub(crate) fn dirichlet_dtheta(log_omega: &[f64], theta: f64) -> f64 {
    let k = log_omega.len() as f64;
    k * psi(k * theta) - k * psi(theta) + log_omega.iter().sum::<f64>()
}

/// `Σ log N(x | 0, var)` over the strictly lower entries of `m`.
pub(crate) fn normal_lower_logpdf(m: &DMatrix<f64>, var: f64) -> f64 {
    let d = m.nrows();
    let count = (d * (d - 1) / 2) as f64;
    let ss = strict_lower_part(m).norm_squared();
    if var == 0.0 {
        return if ss == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    -0.5 * count * (LN_2PI + var.ln()) - 0.5 * ss / var
}

/// Sum of the prior log densities (Gamma diagonals, normal lowers with
/// variance `ωᵢβ`, Dirichlet weights, uniform `θ`).
pub fn log_prior(p: &SckpdParams, h: &SolvedHyper) -> f64 {
    if !(p.theta > 0.0 && p.theta < 1.0) {
        return f64::NEG_INFINITY;
    }
    let mut lp = 0.0;
    lp += p.d1_diag.iter().map(|&x| gamma_logpdf(x, h.a1, h.log_rate1)).sum::<f64>();
    lp += p.d2_diag.iter().map(|&x| gamma_logpdf(x, h.a2, h.log_rate2)).sum::<f64>();
    for (i, (l1, l2)) in p.lowers1.iter().zip(&p.lowers2).enumerate() {
        let var = p.omega[i] * h.beta;
        lp += normal_lower_logpdf(l1, var) + normal_lower_logpdf(l2, var);
    }
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let log_omega: Vec<f64> = p.omega.iter().map(|w| w.ln()).collect();
    lp + dirichlet_logpdf(&log_omega, p.theta)
}

/// Strictly lower entries of a `d x d` matrix in row-major order.
pub(crate) fn lower_indices(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..d).flat_map(|i| (0..i).map(move |j| (i, j)))
}

pub(crate) fn n_lower(d: usize) -> usize {
    d * (d.max(1) - 1) / 2
}

pub(crate) fn read_lower(x: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for ((i, j), &v) in lower_indices(d).zip(x) {
        m[(i, j)] = v;
    }
    m
}

pub(crate) fn write_lower(m: &DMatrix<f64>, out: &mut [f64]) {
    for ((i, j), o) in lower_indices(m.nrows()).zip(out.iter_mut()) {
        *o = m[(i, j)];
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`, stable for large `|x|`.
pub(crate) fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Centered stick-breaking map from `K − 1` reals to the log-simplex.
#[derive(Debug, Clone)]
pub struct StickBreaking {
    pub log_omega: Vec<f64>,
    pub log_jacobian: f64,
    sig: Vec<f64>,
}

impl StickBreaking {
    pub fn forward(y: &[f64]) -> Self {
        let k = y.len() + 1;
        let mut log_omega = Vec::with_capacity(k);
        let mut sig = Vec::with_capacity(k - 1);
        let mut log_rest = 0.0;
        let mut log_jacobian = 0.0;
        for (j, &yj) in y.iter().enumerate() {
            let x = yj - ((k - 1 - j) as f64).ln();
            let (ls, l1s) = (log_logistic(x), log_logistic(-x));
            sig.push(logistic(x));
            log_omega.push(log_rest + ls);
            log_jacobian += ls + l1s + log_rest;
            log_rest += l1s;
        }
        log_omega.push(log_rest);
        Self { log_omega, log_jacobian, sig }
    }

    pub fn omega(&self) -> DVector<f64> {
        DVector::from_iterator(self.log_omega.len(), self.log_omega.iter().map(|l| l.exp()))
    }

    /// Chain rule from `g_k = ∂f/∂log ωₖ` to the unconstrained coordinates,
    /// plus the gradient of the log-Jacobian.
    pub fn backward(&self, g_log_omega: &[f64], out: &mut [f64]) {
        let k = self.log_omega.len();
        let mut tail: f64 = g_log_omega[k - 1];
        for j in (0..k - 1).rev() {
            let s = self.sig[j];
            let jac = 1.0 - 2.0 * s - s * (k - 2 - j) as f64;
            out[j] = g_log_omega[j] * (1.0 - s) - s * tail + jac;
            tail += g_log_omega[j];
        }
    }

    /// Inverse map; requires strictly positive weights.
    pub fn inverse(omega: &[f64]) -> Result<Vec<f64>> {
        let k = omega.len();
        if k == 0 || omega.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("stick-breaking needs strictly positive weights".into()));
        }
        let mut rest = 1.0;
        let mut y = Vec::with_capacity(k - 1);
        for (j, &w) in omega.iter().take(k - 1).enumerate() {
            let z = (w / rest).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
            y.push((z / (1.0 - z)).ln() + ((k - 1 - j) as f64).ln());
            rest -= w;
        }
        Ok(y)
    }
}

/// How the strictly lower entries enter the unconstrained vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LowerParam {
    /// The entries themselves.
    Centered,
    /// Standardized `z` with `⌊L⌋ = √(ωᵢβ) z`.
    #[default]
    NonCentered,
}

/// Index map of the flat unconstrained vector:
/// `[lowers1 | lowers2]` per block and component, then `log D1`, `log D2`,
/// the `K − 1` stick-breaking coordinates and `logit θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub blocks: usize,
    pub lower_param: LowerParam,
}

impl Layout {
    pub fn new(d1: usize, d2: usize, k: usize, lower_param: LowerParam) -> Self {
        Self { d1, d2, k, blocks: 1, lower_param }
    }

    pub fn m1(&self) -> usize {
        n_lower(self.d1)
    }

    pub fn m2(&self) -> usize {
        n_lower(self.d2)
    }

    fn per_component(&self) -> usize {
        self.m1() + self.m2()
    }

    /// Offset of `lowers1` for `(block, component)`; `lowers2` follows it.
    pub fn lower_offset(&self, block: usize, comp: usize) -> usize {
        (block * self.k + comp) * self.per_component()
    }

    pub fn log_d1(&self) -> usize {
        self.blocks * self.k * self.per_component()
    }

    pub fn log_d2(&self) -> usize {
        self.log_d1() + self.d1
    }

    pub fn stick(&self) -> usize {
        self.log_d2() + self.d2
    }

    pub fn logit_theta(&self) -> usize {
        self.stick() + self.k - 1
    }

    pub fn len(&self) -> usize {
        self.logit_theta() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate names, for draw files.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        let tag = match self.lower_param {
            LowerParam::Centered => "L",
            LowerParam::NonCentered => "z",
        };
        for b in 0..self.blocks {
            for c in 0..self.k {
                let pre = if self.blocks > 1 { format!("b{b}_") } else { String::new() };
                out.extend(lower_indices(self.d1).map(|(i, j)| format!("{pre}{tag}1_{c}_{i}_{j}")));
                out.extend(lower_indices(self.d2).map(|(i, j)| format!("{pre}{tag}2_{c}_{i}_{j}")));
            }
        }
        out.extend((0..self.d1).map(|i| format!("log_D1_{i}")));
        out.extend((0..self.d2).map(|i| format!("log_D2_{i}")));
        out.extend((0..self.k - 1).map(|i| format!("stick_{i}")));
        out.push("logit_theta".into());
        out
    }
}

/// Flat unconstrained coordinates together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedState {
    pub layout: Layout,
    pub x: Vec<f64>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maps parameters to unconstrained coordinates. Non-centered lowers need the
/// lower variance scale `β`.
pub fn to_unconstrained(p: &SckpdParams, lower_param: LowerParam, beta: f64) -> Result<UnconstrainedState> {
    p.validate()?;
    let layout = Layout::new(p.d1(), p.d2(), p.k(), lower_param);
    let mut x = vec![0.0; layout.len()];
    let stick = StickBreaking::inverse(p.omega.as_slice())?;
    for c in 0..layout.k {
        let scale = match lower_param {
            LowerParam::Centered => 1.0,
            LowerParam::NonCentered => {
                let s = (p.omega[c] * beta).sqrt();
                if !(s > 0.0) {
                    return Err(Error::InvalidArgument("non-centered lowers need omega_i * beta > 0".into()));
                }
                s
            }
        };
        let off = layout.lower_offset(0, c);
        write_lower(&(&p.lowers1[c] / scale), &mut x[off..off + layout.m1()]);
        write_lower(&(&p.lowers2[c] / scale), &mut x[off + layout.m1()..off + layout.per_component()]);
    }
    for i in 0..layout.d1 {
        x[layout.log_d1() + i] = p.d1_diag[i].ln();
    }
    for i in 0..layout.d2 {
        x[layout.log_d2() + i] = p.d2_diag[i].ln();
    }
    x[layout.stick()..layout.logit_theta()].copy_from_slice(&stick);
    x[layout.logit_theta()] = logit(p.theta);
    Ok(UnconstrainedState { layout, x })
}

pub fn from_unconstrained(u: &UnconstrainedState, beta: f64) -> Result<SckpdParams> {
    let l = &u.layout;
    if u.x.len() != l.len() || l.blocks != 1 {
        return Err(dim_mismatch(format!("state of length {} for layout of length {}", u.x.len(), l.len())));
    }
    let x = &u.x;
    let stick = StickBreaking::forward(&x[l.stick()..l.logit_theta()]);
    let omega = stick.omega();
    let mut lowers1 = Vec::with_capacity(l.k);
    let mut lowers2 = Vec::with_capacity(l.k);
    for c in 0..l.k {
        let scale = match l.lower_param {
            LowerParam::Centered => 1.0,
            LowerParam::NonCentered => (0.5 * (stick.log_omega[c] + beta.ln())).exp(),
        };
        let off = l.lower_offset(0, c);
        lowers1.push(read_lower(&x[off..off + l.m1()], l.d1) * scale);
        lowers2.push(read_lower(&x[off + l.m1()..off + l.per_component()], l.d2) * scale);
    }
    Ok(SckpdParams {
        lowers1,
        lowers2,
        d1_diag: DVector::from_iterator(l.d1, x[l.log_d1()..l.log_d2()].iter().map(|v| v.exp())),
        d2_diag: DVector::from_iterator(l.d2, x[l.log_d2()..l.stick()].iter().map(|v| v.exp())),
        omega,
        theta: logistic(x[l.logit_theta()]),
    })
}

/// Log density and gradient over a flat real vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density (up to a
    /// constant). Non-finite values mark a divergent state.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Adds the Gamma priors on the log diagonals (with the log Jacobian) and
/// their gradients.
pub(crate) fn diag_prior_terms(x: &[f64], layout: &Layout, h: &SolvedHyper, grad: &mut [f64]) -> f64 {
    let mut lp = 0.0;
    for (mode, off, d) in [(1, layout.log_d1(), layout.d1), (2, layout.log_d2(), layout.d2)] {
        let (a, b) = (h.shape(mode), h.rate(mode));
        let cst = a * h.log_rate(mode) - ln_gamma(a);
        for i in off..off + d {
            let e = x[i].exp();
            lp += cst + a * x[i] - b * e;
            grad[i] += a - b * e;
        }
    }
    lp
}

/// Adds the Dirichlet prior on `Ω`, the uniform prior on `θ` with its logit
/// Jacobian, and returns `(value, ∂/∂log ω from the Dirichlet)`.
pub(crate) fn simplex_prior_terms(
    log_omega: &[f64],
    s: f64,
    grad_logit_theta: &mut f64,
) -> (f64, Vec<f64>) {
    let theta = logistic(s);
    let mut lp = dirichlet_logpdf(log_omega, theta);
    *grad_logit_theta += dirichlet_dtheta(log_omega, theta) * theta * (1.0 - theta);
    lp += log_logistic(s) + log_logistic(-s);
    *grad_logit_theta += 1.0 - 2.0 * theta;
    (lp, vec![theta - 1.0; log_omega.len()])
}

/// Static posterior over the unconstrained layout.
#[derive(Debug, Clone)]
pub struct SckpdPosterior {
    pub layout: Layout,
    pub data: DataSummary,
    pub hyper: SolvedHyper,
    pub targets: PriorTargets,
}

impl SckpdPosterior {
    pub fn new(data: DataSummary, hyper: SolvedHyper, targets: PriorTargets, k: usize, lower_param: LowerParam) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        if data.d1 != targets.d1 || data.d2 != targets.d2 {
            return Err(dim_mismatch("data and targets disagree on dims"));
        }
        if lower_param == LowerParam::NonCentered && !(hyper.beta > 0.0) {
            return Err(Error::InvalidArgument("non-centered lowers need beta > 0".into()));
        }
        Ok(Self { layout: Layout::new(data.d1, data.d2, k, lower_param), data, hyper, targets })
    }

    pub fn params(&self, x: &[f64]) -> Result<SckpdParams> {
        from_unconstrained(&UnconstrainedState { layout: self.layout, x: x.to_vec() }, self.hyper.beta)
    }
}

/// Value and gradient of lowers-related terms for one block: the likelihood,
/// the lower prior, and `∂/∂ωᵢ` of both through the lower scale.
pub(crate) struct BlockTerms {
    pub value: f64,
    pub g_d1: DVector<f64>,
    pub g_d2: DVector<f64>,
    /// `∂f/∂ωᵢ` for this block's weights.
    pub g_omega: Vec<f64>,
}

/// Evaluates one data block whose lowers sit at `x[layout.lower_offset(block, ·)]`
/// and whose prior weights are `omega`.
pub(crate) fn block_terms(
    x: &[f64],
    layout: &Layout,
    block: usize,
    omega: &[f64],
    beta: f64,
    d1: &DVector<f64>,
    d2: &DVector<f64>,
    data: &DataSummary,
    grad: &mut [f64],
) -> BlockTerms {
    let (m1, m2) = (layout.m1(), layout.m2());
    let mut lowers1 = Vec::with_capacity(layout.k);
    let mut lowers2 = Vec::with_capacity(layout.k);
    let mut scales = Vec::with_capacity(layout.k);
    let mut value = 0.0;
    let mut g_omega = vec![0.0; layout.k];
    for c in 0..layout.k {
        let off = layout.lower_offset(block, c);
        let r1 = read_lower(&x[off..off + m1], layout.d1);
        let r2 = read_lower(&x[off + m1..off + m1 + m2], layout.d2);
        let var = omega[c] * beta;
        match layout.lower_param {
            LowerParam::Centered => {
                let ss = r1.norm_squared() + r2.norm_squared();
                let cnt = (m1 + m2) as f64;
                value += -0.5 * cnt * (LN_2PI + var.ln()) - 0.5 * ss / var;
                g_omega[c] += -0.5 * cnt / omega[c] + 0.5 * ss / (var * omega[c]);
                for i in off..off + m1 + m2 {
                    grad[i] -= x[i] / var;
                }
                scales.push(1.0);
                lowers1.push(r1);
                lowers2.push(r2);
            }
            LowerParam::NonCentered => {
                let ss = r1.norm_squared() + r2.norm_squared();
                value += -0.5 * (m1 + m2) as f64 * LN_2PI - 0.5 * ss;
                for i in off..off + m1 + m2 {
                    grad[i] -= x[i];
                }
                let s = var.sqrt();
                scales.push(s);
                lowers1.push(r1 * s);
                lowers2.push(r2 * s);
            }
        }
    }
    let lg = log_likelihood_grad(&lowers1, &lowers2, d1, d2, data);
    value += lg.value;
    for c in 0..layout.k {
        let off = layout.lower_offset(block, c);
        let s = scales[c];
        let mut dot = 0.0;
        for ((i, j), slot) in lower_indices(layout.d1).zip(off..off + m1) {
            grad[slot] += lg.lowers1[c][(i, j)] * s;
            dot += lg.lowers1[c][(i, j)] * x[slot];
        }
        for ((i, j), slot) in lower_indices(layout.d2).zip(off + m1..off + m1 + m2) {
            grad[slot] += lg.lowers2[c][(i, j)] * s;
            dot += lg.lowers2[c][(i, j)] * x[slot];
        }
        if layout.lower_param == LowerParam::NonCentered {
            // ∂L/∂ω = z √β / (2√ω) = L / (2ω)
            g_omega[c] += dot * s / (2.0 * omega[c]);
        }
    }
    BlockTerms { value, g_d1: lg.d1, g_d2: lg.d2, g_omega }
}

impl LogDensity for SckpdPosterior {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let stick = StickBreaking::forward(&x[l.stick()..l.logit_theta()]);
        let omega: Vec<f64> = stick.log_omega.iter().map(|v| v.exp()).collect();
        let d1 = DVector::from_iterator(l.d1, x[l.log_d1()..l.log_d2()].iter().map(|v| v.exp()));
        let d2 = DVector::from_iterator(l.d2, x[l.log_d2()..l.stick()].iter().map(|v| v.exp()));

        let mut lp = diag_prior_terms(x, l, &self.hyper, grad);
        let bt = block_terms(x, l, 0, &omega, self.hyper.beta, &d1, &d2, &self.data, grad);
        lp += bt.value;
        for i in 0..l.d1 {
            grad[l.log_d1() + i] += bt.g_d1[i] * d1[i];
        }
        for i in 0..l.d2 {
            grad[l.log_d2() + i] += bt.g_d2[i] * d2[i];
        }
        let mut g_theta = 0.0;
        let (sp, mut g_log_omega) = simplex_prior_terms(&stick.log_omega, x[l.logit_theta()], &mut g_theta);
        lp += sp + stick.log_jacobian;
        for c in 0..l.k {
            g_log_omega[c] += bt.g_omega[c] * omega[c];
        }
        stick.backward(&g_log_omega, &mut grad[l.stick()..l.logit_theta()]);
        grad[l.logit_theta()] = g_theta;
        if lp.is_finite() { lp } else { f64::NEG_INFINITY }
    }
}

/// `(value, gradient)` of the static log posterior in unconstrained
/// coordinates, including every transform Jacobian.
pub fn log_posterior_grad(
    u: &UnconstrainedState,
    data: &DataSummary,
    h: &SolvedHyper,
    t: &PriorTargets,
) -> Result<(f64, Vec<f64>)> {
    let post = SckpdPosterior::new(data.clone(), *h, *t, u.layout.k, u.layout.lower_param)?;
    if u.x.len() != post.dim() {
        return Err(dim_mismatch(format!("state length {} != {}", u.x.len(), post.dim())));
    }
    let mut g = vec![0.0; post.dim()];
    let v = post.log_density_grad(&u.x, &mut g);
    Ok((v, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperprior::{solve_hyper, PriorTargets};
    use crate::kronecker::kron;
    use crate::testutil::{fd_check, random_data, random_params, random_targets};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_ldagger(p: &SckpdParams) -> DMatrix<f64> {
        let (d1, d2) = (p.d1(), p.d2());
        let n = d1 * d2;
        let mut l = DMatrix::zeros(n, n);
        for r in 0..d1 {
            for s in 0..d1 {
                for v in 0..d2 {
                    for w in 0..d2 {
                        let (row, col) = (d2 * r + v, d2 * s + w);
                        if row == col {
                            l[(row, col)] = p.d1_diag[r] * p.d2_diag[v];
                        } else if row > col {
                            for c in 0..p.k() {
                                let a = if r == s { p.d1_diag[r] } else { p.lowers1[c][(r, s)] };
                                let b = if v == w { p.d2_diag[v] } else { p.lowers2[c][(v, w)] };
                                l[(row, col)] += a * b;
                            }
                        }
                    }
                }
            }
        }
        l
    }

    #[test]
    fn assembly_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(&mut rng, 3, 2, 2);
        assert!((assemble_ldagger(&p).matrix() - naive_ldagger(&p)).amax() < 1e-13);
        let expect_diag = kron(&DMatrix::from_diagonal(&p.d1_diag), &DMatrix::from_diagonal(&p.d2_diag)).diagonal();
        assert!((assemble_ldagger(&p).diag() - &expect_diag).amax() < 1e-14);

        for m in p.lowers1.iter_mut().chain(p.lowers2.iter_mut()) {
            m.fill(0.0);
        }
        assert_eq!(assemble_ldagger(&p).matrix(), &DMatrix::from_diagonal(&expect_diag));

        let mut p = random_params(&mut rng, 3, 2, 1);
        p.d1_diag.fill(1.0);
        p.d2_diag.fill(1.0);
        let l1 = &p.lowers1[0] + DMatrix::identity(3, 3);
        let l2 = &p.lowers2[0] + DMatrix::identity(2, 2);
        let expect = strict_lower_part(&kron(&l1, &l2)) + DMatrix::identity(6, 6);
        assert!((assemble_ldagger(&p).matrix() - expect).amax() < 1e-14);
    }

    #[test]
    fn log_det_matches_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (d1, d2) = (rng.random_range(1..5), rng.random_range(1..5));
            let p = random_params(&mut rng, d1, d2, 3);
            let dense = assemble_ldagger(&p).log_det();
            assert!((log_det_ldagger(&p) - dense).abs() < 1e-10 * dense.abs().max(1.0));
        }
    }

    fn dense_trace(p: &SckpdParams, data: &DataSummary) -> f64 {
        let l = assemble_ldagger(p).into_matrix();
        (&l * l.transpose() * data.scatter()).trace()
    }

    #[test]
    fn trace_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(d1, d2, k) in &[(3, 2, 1), (4, 5, 3), (2, 2, 4), (5, 3, 2)] {
            let p = random_params(&mut rng, d1, d2, k);
            let data = random_data(&mut rng, d1, d2, 7);
            let dense = dense_trace(&p, &data);
            let fast = trace_quadratic(&p, &data);
            assert!((fast - dense).abs() < 1e-10 * dense.abs(), "{fast} vs {dense}");
        }
    }

    #[test]
    fn trace_diagonal_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_params(&mut rng, 3, 4, 2);
        for m in p.lowers1.iter_mut().chain(p.lowers2.iter_mut()) {
            m.fill(0.0);
        }
        let data = random_data(&mut rng, 3, 4, 9);
        let sq1 = DMatrix::from_diagonal(&p.d1_diag.map(|x| x * x));
        let sq2 = DMatrix::from_diagonal(&p.d2_diag.map(|x| x * x));
        let expect: f64 = data
            .scatter_pvl
            .terms
            .iter()
            .map(|t| (&sq1 * &t.a).trace() * (&sq2 * &t.b).trace())
            .sum();
        assert!((trace_quadratic(&p, &data) - expect).abs() < 1e-11 * expect.abs());
    }

    fn dense_mvn_loglik(p: &SckpdParams, y: &DMatrix<f64>) -> f64 {
        let l = assemble_ldagger(p).into_matrix();
        let prec = &l * l.transpose();
        let d = y.ncols() as f64;
        let logdet = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        y.row_iter()
            .map(|row| {
                let r = row.transpose();
                0.5 * logdet - 0.5 * (r.transpose() * &prec * &r)[(0, 0)] - 0.5 * d * LN_2PI
            })
            .sum()
    }

    #[test]
    fn likelihood_matches_dense_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 3, 2, 2);
        let y = DMatrix::from_fn(11, 6, |_, _| rng.random_range(-2.0..2.0));
        let data = DataSummary::from_observations(&y, 3, 2).unwrap();
        let v = log_likelihood(&p, &data);
        let dense = dense_mvn_loglik(&p, &y);
        assert!((v - dense).abs() < 1e-10 * dense.abs());

        let ident = SckpdParams::identity(3, 2, 2);
        let v = log_likelihood(&ident, &data);
        assert!((v - (-0.5 * data.trace_scatter - 0.5 * 11.0 * 6.0 * LN_2PI)).abs() < 1e-10 * v.abs());

        // stacking the data twice doubles the value
        let y2 = DMatrix::from_fn(22, 6, |i, j| y[(i % 11, j)]);
        let data2 = DataSummary::from_observations(&y2, 3, 2).unwrap();
        assert!((log_likelihood(&p, &data2) - 2.0 * log_likelihood(&p, &data)).abs() < 1e-9 * v.abs());
    }

    fn scalar_prior_oracle(p: &SckpdParams, h: &SolvedHyper) -> f64 {
        let gam = |x: f64, a: f64, b: f64| a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x;
        let norm = |x: f64, var: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - x * x / (2.0 * var);
        let mut s = 0.0;
        for &x in p.d1_diag.iter() {
            s += gam(x, h.a1, h.rate1);
        }
        for &x in p.d2_diag.iter() {
            s += gam(x, h.a2, h.rate2);
        }
        for c in 0..p.k() {
            for (i, j) in lower_indices(p.d1()) {
                s += norm(p.lowers1[c][(i, j)], p.omega[c] * h.beta);
            }
            for (i, j) in lower_indices(p.d2()) {
                s += norm(p.lowers2[c][(i, j)], p.omega[c] * h.beta);
            }
        }
        let k = p.k() as f64;
        s += ln_gamma(k * p.theta) - k * ln_gamma(p.theta);
        for &w in p.omega.iter() {
            s += (p.theta - 1.0) * w.ln();
        }
        s
    }

    #[test]
    fn prior_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, h) = random_targets(&mut rng, 3, 4);
        let p = random_params(&mut rng, 3, 4, 3);
        let v = log_prior(&p, &h);
        assert!((v - scalar_prior_oracle(&p, &h)).abs() < 1e-10 * v.abs());
    }

    #[test]
    fn prior_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, h) = random_targets(&mut rng, 3, 2);
        let p = random_params(&mut rng, 3, 2, 4);
        // uniform Dirichlet: log (K-1)! = log 6
        let log_omega: Vec<f64> = p.omega.iter().map(|w| w.ln()).collect();
        assert!((dirichlet_logpdf(&log_omega, 1.0) - 6f64.ln()).abs() < 1e-12);

        let mut z = p.clone();
        for m in z.lowers1.iter_mut().chain(z.lowers2.iter_mut()) {
            m.fill(0.0);
        }
        let with = log_prior(&z, &h);
        let mut shifted = z.clone();
        shifted.omega = DVector::from_element(4, 0.25);
        let diff = with - log_prior(&shifted, &h);
        let dir = dirichlet_logpdf(&log_omega, z.theta) - dirichlet_logpdf(&[0.25f64.ln(); 4], z.theta);
        let norm: f64 = (0..4).map(|c| -0.5 * 4.0 * (z.omega[c] / 0.25).ln()).sum();
        assert!((diff - dir - norm).abs() < 1e-10);

        let mut p = random_params(&mut rng, 3, 2, 2);
        p.omega = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(log_prior(&p, &h), f64::NEG_INFINITY);
    }

    #[test]
    fn unconstrained_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for lp in [LowerParam::Centered, LowerParam::NonCentered] {
            for _ in 0..20 {
                let k = rng.random_range(1..5);
                let p = random_params(&mut rng, 3, 4, k);
                let u = to_unconstrained(&p, lp, 1.7).unwrap();
                assert_eq!(u.x.len(), u.layout.names().len());
                let back = from_unconstrained(&u, 1.7).unwrap();
                for (a, b) in back.lowers1.iter().zip(&p.lowers1).chain(back.lowers2.iter().zip(&p.lowers2)) {
                    assert!((a - b).amax() < 1e-12);
                }
                assert!((&back.d1_diag - &p.d1_diag).amax() < 1e-12);
                assert!((&back.d2_diag - &p.d2_diag).amax() < 1e-12);
                assert!((&back.omega - &p.omega).amax() < 1e-12);
                assert!((back.theta - p.theta).abs() < 1e-12);
            }
        }
        let mut p = SckpdParams::identity(2, 3, 5);
        p.d1_diag = DVector::from_vec(vec![0.5, 2.0]);
        let u = to_unconstrained(&p, LowerParam::Centered, 1.0).unwrap();
        let l = u.layout;
        assert!(u.x[l.stick()..l.logit_theta()].iter().all(|v| v.abs() < 1e-12));
        assert!((u.x[l.log_d1()] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn stick_breaking_jacobian_matches_determinant() {
        // log|det ∂(ω₁..ω_{K−1})/∂y| by central differences
        let y = [0.3, -1.2, 0.7];
        let sb = StickBreaking::forward(&y);
        let h = 1e-6;
        let mut jac = DMatrix::zeros(3, 3);
        for j in 0..3 {
            let (mut yp, mut ym) = (y, y);
            yp[j] += h;
            ym[j] -= h;
            let (wp, wm) = (StickBreaking::forward(&yp).omega(), StickBreaking::forward(&ym).omega());
            for i in 0..3 {
                jac[(i, j)] = (wp[i] - wm[i]) / (2.0 * h);
            }
        }
        assert!((jac.determinant().abs().ln() - sb.log_jacobian).abs() < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for lp in [LowerParam::Centered, LowerParam::NonCentered] {
            for _ in 0..6 {
                let (d1, d2, k) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(1..4));
                let data = random_data(&mut rng, d1, d2, 13);
                let (t, h) = random_targets(&mut rng, d1, d2);
                let post = SckpdPosterior::new(data, h, t, k, lp).unwrap();
                let x: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                fd_check(&post, &x, &format!("{lp:?}"));
            }
        }
    }

    #[test]
    fn posterior_value_is_likelihood_plus_prior_plus_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = random_data(&mut rng, 3, 2, 10);
        let (t, h) = random_targets(&mut rng, 3, 2);
        let p = random_params(&mut rng, 3, 2, 3);
        for lp in [LowerParam::Centered, LowerParam::NonCentered] {
            let u = to_unconstrained(&p, lp, h.beta).unwrap();
            let (v, _) = log_posterior_grad(&u, &data, &h, &t).unwrap();
            let stick = StickBreaking::forward(&u.x[u.layout.stick()..u.layout.logit_theta()]);
            let mut jac = stick.log_jacobian + (p.theta * (1.0 - p.theta)).ln();
            jac += p.d1_diag.iter().chain(p.d2_diag.iter()).map(|x| x.ln()).sum::<f64>();
            if lp == LowerParam::NonCentered {
                let per = (u.layout.m1() + u.layout.m2()) as f64;
                jac += p.omega.iter().map(|w| 0.5 * per * (w * h.beta).ln()).sum::<f64>();
            }
            let expect = log_likelihood(&p, &data) + log_prior(&p, &h) + jac;
            assert!((v - expect).abs() < 1e-9 * expect.abs(), "{lp:?}: {v} vs {expect}");
        }
    }

    #[test]
    fn zero_data_gradient_is_prior_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, h) = random_targets(&mut rng, 3, 2);
        let post = SckpdPosterior::new(DataSummary::empty(3, 2).unwrap(), h, t, 2, LowerParam::Centered).unwrap();
        let x: Vec<f64> = (0..post.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = vec![0.0; x.len()];
        post.log_density_grad(&x, &mut g);
        // Gamma prior in log coordinates: a − b e^u, the +1 Jacobian included in a
        let l = post.layout;
        for i in 0..l.d1 {
            let expect = h.a1 - h.rate1 * x[l.log_d1() + i].exp();
            assert!((g[l.log_d1() + i] - expect).abs() < 1e-12);
        }
        // centered lowers: −x / (ω β)
        let p = post.params(&x).unwrap();
        let off = l.lower_offset(0, 1);
        assert!((g[off] + x[off] / (p.omega[1] * h.beta)).abs() < 1e-10);
        fd_check(&post, &x, "empty");
    }

    #[test]
    fn posterior_label_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_data(&mut rng, 3, 3, 20);
        let (t, h) = random_targets(&mut rng, 3, 3);
        let p = random_params(&mut rng, 3, 3, 3);
        let perm = [2, 0, 1];
        let q = SckpdParams {
            lowers1: perm.iter().map(|&i| p.lowers1[i].clone()).collect(),
            lowers2: perm.iter().map(|&i| p.lowers2[i].clone()).collect(),
            omega: DVector::from_iterator(3, perm.iter().map(|&i| p.omega[i])),
            ..p.clone()
        };
        for lp in [LowerParam::Centered, LowerParam::NonCentered] {
            let vp = log_posterior_grad(&to_unconstrained(&p, lp, h.beta).unwrap(), &data, &h, &t).unwrap().0;
            let vq = log_posterior_grad(&to_unconstrained(&q, lp, h.beta).unwrap(), &data, &h, &t).unwrap().0;
            let jp = StickBreaking::forward(&StickBreaking::inverse(p.omega.as_slice()).unwrap()).log_jacobian;
            let jq = StickBreaking::forward(&StickBreaking::inverse(q.omega.as_slice()).unwrap()).log_jacobian;
            // the stick-breaking Jacobian is not permutation invariant; everything else is
            assert!(((vp - jp) - (vq - jq)).abs() < 1e-9 * vp.abs());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn trace_matches_dense_prop(seed in any::<u64>(), d1 in 1usize..6, d2 in 1usize..6, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(&mut rng, d1, d2, k);
            let data = random_data(&mut rng, d1, d2, 6);
            let dense = dense_trace(&p, &data);
            prop_assert!((trace_quadratic(&p, &data) - dense).abs() < 1e-9 * dense.abs());
        }

        #[test]
        fn ldagger_diagonal_always_positive(seed in any::<u64>(), scale in 0.0..50.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = random_params(&mut rng, 3, 4, 2);
            for m in p.lowers1.iter_mut().chain(p.lowers2.iter_mut()) {
                *m *= scale;
            }
            prop_assert!(assemble_ldagger(&p).diag().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn stick_breaking_on_simplex(y in proptest::collection::vec(-30.0..30.0f64, 1..8)) {
            let sb = StickBreaking::forward(&y);
            let w = sb.omega();
            prop_assert!((w.sum() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn boundary_shape_prior_is_finite() {
        // c1 = √10/5 < 1: mode 1 has no root and its rate underflows
        let t = PriorTargets::new(0.0, 10.0, 3.0, 5, 2).unwrap();
        let h = solve_hyper(&t, 1e-10).unwrap();
        assert_eq!(h.kind1, crate::hyperprior::ShapeKind::Boundary);
        assert_eq!(h.rate1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_params(&mut rng, 5, 2, 2);
        assert!(log_prior(&p, &h).is_finite());
        let post = SckpdPosterior::new(random_data(&mut rng, 5, 2, 30), h, t, 2, LowerParam::Centered).unwrap();
        let x = to_unconstrained(&p, LowerParam::Centered, h.beta).unwrap().x;
        let mut g = vec![0.0; x.len()];
        assert!(post.log_density_grad(&x, &mut g).is_finite());
        fd_check(&post, &x, "boundary");
    }

    #[test]
    fn hyper_from_identity_targets() {
        let t = PriorTargets::new(0.0, 6.0, 3.0, 3, 2).unwrap();
        let h = solve_hyper(&t, 1e-10).unwrap();
        assert!(h.beta > 0.0);
    }
}
