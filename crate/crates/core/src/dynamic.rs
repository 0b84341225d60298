//! The seasonal model.
//!
//! Data arrive in blocks indexed by cycle `c` and season `s` (both 1-based),
//! stored in time order `t = S(c−1) + s`. Every block has its own lowers, whose
//! prior variance is `ω_{i,t} β`; the diagonals, `β`, `θ` and the first
//! weight vector `Ω₁` are shared. Later weights come from a chain of
//! column-stochastic transitions `W_e = A W_{e−1}`, `W_0 = Ω₁`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{dim_mismatch, Error, Result};
use crate::hyperprior::{PriorTargets, SolvedHyper};
use crate::model::{
    block_terms, diag_prior_terms, logistic, read_lower, simplex_prior_terms, write_lower, DataSummary, Layout,
    LogDensity, LowerParam, SckpdParams, StickBreaking,
};

/// Column sums must match 1 to this tolerance.
pub const COLUMN_SUM_TOL: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-10;

/// Nonnegative `K x K` matrix whose columns sum to one, optionally with the
/// positive gammas it was normalized from.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    a: DMatrix<f64>,
    gammas: Option<DMatrix<f64>>,
}

impl StochasticMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare { rows: a.nrows(), cols: a.ncols() });
        }
        if let Some(x) = a.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("stochastic matrix has entry {x}")));
        }
        for (j, col) in a.column_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::InvalidArgument(format!("column {j} of the transition matrix sums to {s}")));
            }
        }
        Ok(Self { a, gammas: None })
    }

    pub fn identity(k: usize) -> Self {
        Self { a: DMatrix::identity(k, k), gammas: None }
    }

    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn gammas(&self) -> Option<&DMatrix<f64>> {
        self.gammas.as_ref()
    }
}

/// `A[i, j] = G[i, j] / Σₖ G[k, j]`. With `G[i, j] ~ Γ(α, 1)` independently,
/// each column of `A` is `Dirichlet(α 1_K)`.
pub fn stochastic_from_gammas(g: &DMatrix<f64>) -> Result<StochasticMatrix> {
    if !g.is_square() {
        return Err(Error::NotSquare { rows: g.nrows(), cols: g.ncols() });
    }
    if let Some(x) = g.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma entries must be positive and finite, got {x}")));
    }
    let mut a = g.clone();
    for mut col in a.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    Ok(StochasticMatrix { a, gammas: Some(g.clone()) })
}

fn check_simplex(omega: &DVector<f64>) -> Result<()> {
    let s = omega.sum();
    if omega.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("weights are not on the simplex (sum {s})")));
    }
    Ok(())
}

/// `Aᵏ ω`.
pub fn propagate_omega(a: &StochasticMatrix, omega: &DVector<f64>, steps: usize) -> Result<DVector<f64>> {
    if omega.len() != a.k() {
        return Err(dim_mismatch(format!("{} weights for a {}x{} transition", omega.len(), a.k(), a.k())));
    }
    StochasticMatrix::new(a.a.clone())?;
    check_simplex(omega)?;
    let mut w = omega.clone();
    for _ in 0..steps {
        w = &a.a * w;
    }
    Ok(w)
}

/// Which power of the transition chain a block `(c, s)` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExponentConvention {
    /// `Ω(c, s) = W_{t−1}` with `t = S(c−1) + s`: one transition per block.
    #[default]
    TimeIndex,
    /// `Ω(c, s) = W_{c+s−1}`.
    CyclePlusSeason,
}

/// Transition matrices together with the map from season to matrix. The
/// transition into chain state `e` uses `matrices[activation[e mod S]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub convention: ExponentConvention,
    pub activation: Vec<usize>,
}

impl Propagation {
    /// One matrix for every transition.
    pub fn single(n_seasons: usize, convention: ExponentConvention) -> Self {
        Self { convention, activation: vec![0; n_seasons] }
    }

    /// Chain state of block `b` (0-based time order).
    pub fn state_of_block(&self, b: usize, n_seasons: usize) -> usize {
        match self.convention {
            ExponentConvention::TimeIndex => b,
            ExponentConvention::CyclePlusSeason => b / n_seasons + b % n_seasons + 1,
        }
    }

    pub fn n_states(&self, n_blocks: usize, n_seasons: usize) -> usize {
        (0..n_blocks).map(|b| self.state_of_block(b, n_seasons) + 1).max().unwrap_or(1)
    }

    /// Matrix index for the transition into state `e ≥ 1`.
    pub fn matrix_for(&self, e: usize, n_seasons: usize) -> usize {
        self.activation[e % n_seasons]
    }

    /// Number of matrices the schedule needs; zero when there are no
    /// transitions.
    pub fn n_matrices(&self, n_blocks: usize, n_seasons: usize) -> usize {
        if self.n_states(n_blocks, n_seasons) <= 1 {
            0
        } else {
            self.activation.iter().max().map_or(0, |m| m + 1)
        }
    }

    fn validate(&self, n_seasons: usize) -> Result<()> {
        if self.activation.len() != n_seasons {
            return Err(dim_mismatch(format!(
                "activation map has {} entries for {n_seasons} seasons",
                self.activation.len()
            )));
        }
        if self.convention == ExponentConvention::CyclePlusSeason && self.activation.iter().any(|&m| m != 0) {
            return Err(Error::InvalidArgument("the c+s−1 convention supports a single transition matrix".into()));
        }
        Ok(())
    }

    /// Weights for every chain state `0..n_states`.
    pub fn states(&self, matrices: &[StochasticMatrix], omega1: &DVector<f64>, n_states: usize, n_seasons: usize) -> Result<Vec<DVector<f64>>> {
        check_simplex(omega1)?;
        let mut out = vec![omega1.clone()];
        for e in 1..n_states {
            let m = matrices.get(self.matrix_for(e, n_seasons)).ok_or_else(|| {
                Error::InvalidArgument(format!("activation refers to missing matrix {}", self.matrix_for(e, n_seasons)))
            })?;
            let next = propagate_omega(m, &out[e - 1], 1)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Per-block data in time order.
#[derive(Debug, Clone)]
pub struct SeasonSchedule {
    pub n_seasons: usize,
    pub n_cycles: usize,
    pub blocks: Vec<DataSummary>,
}

impl SeasonSchedule {
    pub fn new(n_seasons: usize, n_cycles: usize, blocks: Vec<DataSummary>) -> Result<Self> {
        if n_seasons == 0 || n_cycles == 0 {
            return Err(Error::Empty("season schedule"));
        }
        if blocks.len() != n_seasons * n_cycles {
            return Err(dim_mismatch(format!(
                "{} blocks for {n_cycles} cycles x {n_seasons} seasons",
                blocks.len()
            )));
        }
        let (d1, d2) = (blocks[0].d1, blocks[0].d2);
        if blocks.iter().any(|b| b.d1 != d1 || b.d2 != d2) {
            return Err(dim_mismatch("all blocks must share (d1, d2)"));
        }
        Ok(Self { n_seasons, n_cycles, blocks })
    }

    /// 0-based time index of 1-based `(c, s)`.
    pub fn time_index(&self, c: usize, s: usize) -> usize {
        self.n_seasons * (c - 1) + (s - 1)
    }

    pub fn block(&self, c: usize, s: usize) -> &DataSummary {
        &self.blocks[self.time_index(c, s)]
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.blocks[0].d1, self.blocks[0].d2)
    }
}

/// Parameters of the seasonal model.
#[derive(Debug, Clone, PartialEq)]
pub struct SdParams {
    /// First block's lowers, the shared diagonals, `Ω₁` and `θ`.
    pub base: SckpdParams,
    /// Lowers of blocks `1..`, as `(lowers1, lowers2)`.
    pub later_lowers: Vec<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)>,
    pub matrices: Vec<StochasticMatrix>,
    pub propagation: Propagation,
}

impl SdParams {
    pub fn n_blocks(&self) -> usize {
        1 + self.later_lowers.len()
    }

    /// `Ω` of every block.
    pub fn block_omegas(&self, n_seasons: usize) -> Result<Vec<DVector<f64>>> {
        let nb = self.n_blocks();
        let states = self.propagation.states(
            &self.matrices,
            &self.base.omega,
            self.propagation.n_states(nb, n_seasons),
            n_seasons,
        )?;
        Ok((0..nb).map(|b| states[self.propagation.state_of_block(b, n_seasons)].clone()).collect())
    }

    /// Static parameters of block `b`: its lowers and weights with the shared
    /// diagonals and `θ`.
    pub fn block_params(&self, b: usize, n_seasons: usize) -> Result<SckpdParams> {
        let omega = self.block_omegas(n_seasons)?.swap_remove(b);
        let mut p = self.base.clone();
        if b > 0 {
            let (l1, l2) = &self.later_lowers[b - 1];
            p.lowers1 = l1.clone();
            p.lowers2 = l2.clone();
        }
        p.omega = omega;
        Ok(p)
    }
}

/// Static layout over all blocks followed by the log-gammas of each
/// transition matrix (column-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SdLayout {
    pub base: Layout,
    pub n_matrices: usize,
}

impl SdLayout {
    pub fn gamma_offset(&self, m: usize) -> usize {
        self.base.len() + m * self.base.k * self.base.k
    }

    pub fn len(&self) -> usize {
        self.gamma_offset(self.n_matrices)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = self.base.names();
        let k = self.base.k;
        for m in 0..self.n_matrices {
            for j in 0..k {
                out.extend((0..k).map(|i| format!("log_G{m}_{i}_{j}")));
            }
        }
        out
    }
}

/// Seasonal posterior over the unconstrained [`SdLayout`].
#[derive(Debug, Clone)]
pub struct SdPosterior {
    pub layout: SdLayout,
    pub schedule: SeasonSchedule,
    pub propagation: Propagation,
    pub hyper: SolvedHyper,
    pub targets: PriorTargets,
    /// Shape of the Gamma prior on transition gammas.
    pub gamma_shape: f64,
}

impl SdPosterior {
    pub fn new(
        schedule: SeasonSchedule,
        propagation: Propagation,
        hyper: SolvedHyper,
        targets: PriorTargets,
        k: usize,
        lower_param: LowerParam,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        let (d1, d2) = schedule.dims();
        if (d1, d2) != (targets.d1, targets.d2) {
            return Err(dim_mismatch("schedule and targets disagree on dims"));
        }
        if lower_param == LowerParam::NonCentered && !(hyper.beta > 0.0) {
            return Err(Error::InvalidArgument("non-centered lowers need beta > 0".into()));
        }
        propagation.validate(schedule.n_seasons)?;
        let mut base = Layout::new(d1, d2, k, lower_param);
        base.blocks = schedule.n_blocks();
        let n_matrices = propagation.n_matrices(schedule.n_blocks(), schedule.n_seasons);
        Ok(Self { layout: SdLayout { base, n_matrices }, schedule, propagation, hyper, targets, gamma_shape: 1.0 })
    }

    fn matrices(&self, x: &[f64]) -> Vec<StochasticMatrix> {
        let k = self.layout.base.k;
        (0..self.layout.n_matrices)
            .map(|m| {
                let off = self.layout.gamma_offset(m);
                let g = DMatrix::from_iterator(k, k, x[off..off + k * k].iter().map(|v| v.exp()));
                let mut a = g.clone();
                for mut col in a.column_iter_mut() {
                    let s = col.sum();
                    col /= s;
                }
                StochasticMatrix { a, gammas: Some(g) }
            })
            .collect()
    }

    pub fn params(&self, x: &[f64]) -> Result<SdParams> {
        let l = &self.layout.base;
        if x.len() != self.layout.len() {
            return Err(dim_mismatch(format!("state of length {} for layout of length {}", x.len(), self.layout.len())));
        }
        let stick = StickBreaking::forward(&x[l.stick()..l.logit_theta()]);
        let matrices = self.matrices(x);
        let ns = self.schedule.n_seasons;
        let states = self.propagation.states(&matrices, &stick.omega(), self.propagation.n_states(l.blocks, ns), ns)?;
        let mut lowers = Vec::with_capacity(l.blocks);
        for b in 0..l.blocks {
            let omega = &states[self.propagation.state_of_block(b, ns)];
            let (mut l1, mut l2) = (Vec::new(), Vec::new());
            for c in 0..l.k {
                let scale = match l.lower_param {
                    LowerParam::Centered => 1.0,
                    LowerParam::NonCentered => (omega[c] * self.hyper.beta).sqrt(),
                };
                let off = l.lower_offset(b, c);
                l1.push(read_lower(&x[off..off + l.m1()], l.d1) * scale);
                l2.push(read_lower(&x[off + l.m1()..off + l.m1() + l.m2()], l.d2) * scale);
            }
            lowers.push((l1, l2));
        }
        let mut lowers = lowers.into_iter();
        let (lowers1, lowers2) = lowers.next().ok_or(Error::Empty("blocks"))?;
        Ok(SdParams {
            base: SckpdParams {
                lowers1,
                lowers2,
                d1_diag: DVector::from_iterator(l.d1, x[l.log_d1()..l.log_d2()].iter().map(|v| v.exp())),
                d2_diag: DVector::from_iterator(l.d2, x[l.log_d2()..l.stick()].iter().map(|v| v.exp())),
                omega: stick.omega(),
                theta: logistic(x[l.logit_theta()]),
            },
            later_lowers: lowers.collect(),
            matrices,
            propagation: self.propagation.clone(),
        })
    }

    /// Inverse of [`SdPosterior::params`]. Transition matrices without gammas
    /// use `G = A`, which needs strictly positive entries.
    pub fn to_unconstrained(&self, p: &SdParams) -> Result<Vec<f64>> {
        let l = &self.layout.base;
        if p.n_blocks() != l.blocks || p.base.k() != l.k || p.matrices.len() < self.layout.n_matrices {
            return Err(dim_mismatch("parameters do not match the posterior layout"));
        }
        p.base.validate()?;
        let mut x = vec![0.0; self.layout.len()];
        let omegas = p.block_omegas(self.schedule.n_seasons)?;
        for b in 0..l.blocks {
            let (l1, l2) = if b == 0 { (&p.base.lowers1, &p.base.lowers2) } else { (&p.later_lowers[b - 1].0, &p.later_lowers[b - 1].1) };
            for c in 0..l.k {
                let scale = match l.lower_param {
                    LowerParam::Centered => 1.0,
                    LowerParam::NonCentered => (omegas[b][c] * self.hyper.beta).sqrt(),
                };
                if !(scale > 0.0) {
                    return Err(Error::InvalidArgument("non-centered lowers need positive weights".into()));
                }
                let off = l.lower_offset(b, c);
                write_lower(&(&l1[c] / scale), &mut x[off..off + l.m1()]);
                write_lower(&(&l2[c] / scale), &mut x[off + l.m1()..off + l.m1() + l.m2()]);
            }
        }
        for i in 0..l.d1 {
            x[l.log_d1() + i] = p.base.d1_diag[i].ln();
        }
        for i in 0..l.d2 {
            x[l.log_d2() + i] = p.base.d2_diag[i].ln();
        }
        x[l.stick()..l.logit_theta()].copy_from_slice(&StickBreaking::inverse(p.base.omega.as_slice())?);
        x[l.logit_theta()] = (p.base.theta / (1.0 - p.base.theta)).ln();
        for m in 0..self.layout.n_matrices {
            let g = p.matrices[m].gammas().unwrap_or(p.matrices[m].matrix());
            if g.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidArgument("transition gammas must be positive".into()));
            }
            let off = self.layout.gamma_offset(m);
            for (slot, v) in x[off..].iter_mut().zip(g.iter()) {
                *slot = v.ln();
            }
        }
        Ok(x)
    }
}

impl LogDensity for SdPosterior {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout.base;
        let (k, ns) = (l.k, self.schedule.n_seasons);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let stick = StickBreaking::forward(&x[l.stick()..l.logit_theta()]);
        let d1 = DVector::from_iterator(l.d1, x[l.log_d1()..l.log_d2()].iter().map(|v| v.exp()));
        let d2 = DVector::from_iterator(l.d2, x[l.log_d2()..l.stick()].iter().map(|v| v.exp()));
        let mut lp = diag_prior_terms(x, l, &self.hyper, grad);

        let matrices = self.matrices(x);
        let n_states = self.propagation.n_states(l.blocks, ns);
        let mut states = vec![stick.omega()];
        for e in 1..n_states {
            let next = matrices[self.propagation.matrix_for(e, ns)].matrix() * &states[e - 1];
            states.push(next);
        }

        let blocks: Vec<_> = (0..l.blocks)
            .into_par_iter()
            .map(|b| {
                let omega = &states[self.propagation.state_of_block(b, ns)];
                let mut scratch = vec![0.0; x.len()];
                let bt = block_terms(x, l, b, omega.as_slice(), self.hyper.beta, &d1, &d2, &self.schedule.blocks[b], &mut scratch);
                let (lo, hi) = (l.lower_offset(b, 0), l.lower_offset(b, k));
                (bt, scratch[lo..hi].to_vec())
            })
            .collect();

        let mut adj = vec![DVector::<f64>::zeros(k); n_states];
        let mut g_d1 = DVector::zeros(l.d1);
        let mut g_d2 = DVector::zeros(l.d2);
        for (b, (bt, g)) in blocks.into_iter().enumerate() {
            lp += bt.value;
            g_d1 += &bt.g_d1;
            g_d2 += &bt.g_d2;
            adj[self.propagation.state_of_block(b, ns)] += DVector::from_vec(bt.g_omega);
            let lo = l.lower_offset(b, 0);
            grad[lo..lo + g.len()].copy_from_slice(&g);
        }
        for i in 0..l.d1 {
            grad[l.log_d1() + i] += g_d1[i] * d1[i];
        }
        for i in 0..l.d2 {
            grad[l.log_d2() + i] += g_d2[i] * d2[i];
        }

        // reverse pass through W_e = A W_{e−1}
        let mut g_a = vec![DMatrix::<f64>::zeros(k, k); matrices.len()];
        for e in (1..n_states).rev() {
            let m = self.propagation.matrix_for(e, ns);
            g_a[m] += &adj[e] * states[e - 1].transpose();
            let back = matrices[m].matrix().tr_mul(&adj[e]);
            adj[e - 1] += back;
        }
        let alpha = self.gamma_shape;
        let cst = -ln_gamma(alpha);
        for (m, (sm, ga)) in matrices.iter().zip(&g_a).enumerate() {
            let (a, g) = (sm.matrix(), sm.gammas().expect("built from gammas"));
            let off = self.layout.gamma_offset(m);
            for j in 0..k {
                let inner: f64 = (0..k).map(|i| ga[(i, j)] * a[(i, j)]).sum();
                for i in 0..k {
                    let slot = off + i + k * j;
                    // Γ(α, 1) on G = e^v with its Jacobian
                    lp += cst + alpha * x[slot] - g[(i, j)];
                    grad[slot] = a[(i, j)] * (ga[(i, j)] - inner) + alpha - g[(i, j)];
                }
            }
        }

        let mut g_theta = 0.0;
        let (sp, mut g_log_omega) = simplex_prior_terms(&stick.log_omega, x[l.logit_theta()], &mut g_theta);
        lp += sp + stick.log_jacobian;
        for c in 0..k {
            g_log_omega[c] += adj[0][c] * states[0][c];
        }
        stick.backward(&g_log_omega, &mut grad[l.stick()..l.logit_theta()]);
        grad[l.logit_theta()] = g_theta;
        if lp.is_finite() { lp } else { f64::NEG_INFINITY }
    }
}

/// `(value, gradient)` of the seasonal log posterior at `x`.
pub fn sd_log_posterior_grad(post: &SdPosterior, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.len() != post.dim() {
        return Err(dim_mismatch(format!("state length {} != {}", x.len(), post.dim())));
    }
    let mut g = vec![0.0; x.len()];
    let v = post.log_density_grad(x, &mut g);
    Ok((v, g))
}
