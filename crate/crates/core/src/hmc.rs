//! Hamiltonian Monte Carlo with a fixed number of leapfrog steps.
//!
//! Each chain draws from its own `ChaCha8` stream: the generator is seeded
//! with `seed_from_u64(config.seed)` and then switched to stream `chain_id`,
//! so chains are independent, reproducible and do not depend on scheduling.
//! Per iteration the chain consumes one standard normal per coordinate for
//! the momentum, one uniform for the step jitter (when enabled) and one
//! uniform for the accept step.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LogDensity;

/// Energy errors above this mark a transition as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;
/// Random initial points are redrawn this many times before giving up.
pub const MAX_INIT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    /// Initial step size.
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub target_accept: f64,
    pub n_warmup: usize,
    pub n_draws: usize,
    pub seed: u64,
    /// Diagonal of the mass matrix `M`; `None` means the identity.
    pub mass: Option<Vec<f64>>,
    /// Re-estimate the mass from warmup draws.
    pub adapt_mass: bool,
    /// Adapt a dense `M⁻¹` instead of its diagonal.
    pub dense_mass: bool,
    /// Random initial points are uniform on `[-init_radius, init_radius]`.
    pub init_radius: f64,
    /// Each trajectory uses `ε·(1 + u)` with `u` uniform on
    /// `[-step_jitter, step_jitter]`, which breaks periodic trajectories.
    pub step_jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            n_leapfrog: 20,
            target_accept: 0.8,
            n_warmup: 1000,
            n_draws: 1000,
            seed: 0,
            mass: None,
            adapt_mass: true,
            dense_mass: false,
            init_radius: 2.0,
            step_jitter: 0.1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive and finite");
        }
        if self.n_leapfrog == 0 {
            return bad("n_leapfrog must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        if !(self.step_jitter >= 0.0 && self.step_jitter < 1.0) {
            return bad("step_jitter must lie in [0, 1)");
        }
        if !(self.init_radius >= 0.0) {
            return bad("init_radius must be nonnegative");
        }
        if let Some(m) = &self.mass {
            if m.len() != dim {
                return Err(crate::error::dim_mismatch(format!("mass has {} entries for dimension {dim}", m.len())));
            }
            if m.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return bad("mass entries must be positive and finite");
            }
        }
        Ok(())
    }
}

/// One sampled chain. Per-draw vectors cover the post-warmup draws only.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub chain_id: u64,
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub accept_flags: Vec<bool>,
    /// Metropolis acceptance probability of each transition.
    pub accept_prob: Vec<f64>,
    /// Hamiltonian at the end of each trajectory; non-finite only for
    /// divergent transitions.
    pub energies: Vec<f64>,
    pub divergent: Vec<bool>,
    pub adapted_step_size: f64,
    /// `M⁻¹` used after warmup.
    pub metric: Metric,
    pub warmup_divergences: usize,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        mean(&self.accept_prob)
    }

    pub fn n_divergent(&self) -> usize {
        self.divergent.iter().filter(|d| **d).count()
    }

    /// Draws of coordinate `i`.
    pub fn coordinate(&self, i: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[i]).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
}

/// Adapter turning a closure `(q, grad) -> log density` into a [`LogDensity`].
pub struct FnDensity<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.f)(x, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Completed steps; less than requested only when divergent.
    pub steps: usize,
    pub divergent: bool,
}

/// Inverse mass matrix `M⁻¹` of the kinetic energy `½ pᵀM⁻¹p`.
#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Diagonal(Vec<f64>),
    /// `M⁻¹` with its lower Cholesky factor.
    Dense { inv_mass: DMatrix<f64>, factor: DMatrix<f64> },
}

impl Metric {
    pub fn dense(inv_mass: DMatrix<f64>) -> Result<Self> {
        let factor = inv_mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("dense inverse mass is not positive definite".into()))?
            .l();
        Ok(Self::Dense { inv_mass, factor })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal(m) => m.len(),
            Self::Dense { inv_mass, .. } => inv_mass.nrows(),
        }
    }

    /// Diagonal of `M⁻¹`.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Self::Diagonal(m) => m.clone(),
            Self::Dense { inv_mass, .. } => inv_mass.diagonal().iter().copied().collect(),
        }
    }

    /// `M⁻¹ p`.
    pub fn velocity(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal(m) => p.iter().zip(m).map(|(p, m)| p * m).collect(),
            Self::Dense { inv_mass, .. } => (inv_mass * DVector::from_column_slice(p)).as_slice().to_vec(),
        }
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * self.velocity(p).iter().zip(p).map(|(v, p)| v * p).sum::<f64>()
    }

    /// Momentum `p ~ N(0, M)` from standard normals `z`: `z / √m` or
    /// `p = L⁻ᵀz` with `M⁻¹ = LLᵀ`.
    fn momentum_from(&self, z: Vec<f64>) -> Vec<f64> {
        match self {
            Self::Diagonal(m) => z.iter().zip(m).map(|(z, m)| z / m.sqrt()).collect(),
            Self::Dense { factor, .. } => factor
                .tr_solve_lower_triangular(&DVector::from_vec(z))
                .expect("factor has a positive diagonal")
                .as_slice()
                .to_vec(),
        }
    }
}

/// `n_steps` position-Verlet steps for `H(q, p) = −log π(q) + ½ pᵀM⁻¹p`
/// with a diagonal `M⁻¹`; see [`leapfrog_metric`].
pub fn leapfrog<F>(grad_fn: F, q: &[f64], p: &[f64], eps: f64, n_steps: usize, inv_mass: &[f64]) -> Trajectory
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    leapfrog_metric(grad_fn, q, p, eps, n_steps, &Metric::Diagonal(inv_mass.to_vec()))
}

/// `n_steps` position-Verlet steps: half-step `q`, full-step `p`, half-step
/// `q`. Stops early, flagged divergent, at the first non-finite density or
/// gradient.
pub fn leapfrog_metric<F>(mut grad_fn: F, q: &[f64], p: &[f64], eps: f64, n_steps: usize, metric: &Metric) -> Trajectory
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut q = q.to_vec();
    let mut p = p.to_vec();
    let mut g = vec![0.0; q.len()];
    let mut v = metric.velocity(&p);
    for step in 0..n_steps {
        for i in 0..q.len() {
            q[i] += 0.5 * eps * v[i];
        }
        let lp = grad_fn(&q, &mut g);
        if !lp.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Trajectory { q, p, steps: step, divergent: true };
        }
        for i in 0..q.len() {
            p[i] += eps * g[i];
        }
        v = metric.velocity(&p);
        for i in 0..q.len() {
            q[i] += 0.5 * eps * v[i];
        }
    }
    Trajectory { q, p, steps: n_steps, divergent: false }
}

/// Nesterov dual averaging of `log ε` toward a target acceptance rate.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    count: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    pub fn new(eps0: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps0).ln(), h_bar: 0.0, log_eps_bar: 0.0, count: 0.0, target }
    }

    /// Feeds one acceptance probability and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.count += 1.0;
        let m = self.count;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        let log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    /// Averaged step size, used once adaptation stops.
    pub fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct Sampler<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    rng: ChaCha8Rng,
    q: Vec<f64>,
    lp: f64,
    metric: Metric,
    scratch: Vec<f64>,
    jitter: f64,
}

struct Transition {
    accept_prob: f64,
    accepted: bool,
    energy: f64,
    divergent: bool,
}

impl<T: LogDensity + ?Sized> Sampler<'_, T> {
    fn momentum(&mut self) -> Vec<f64> {
        let rng = &mut self.rng;
        let z = (0..self.metric.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        self.metric.momentum_from(z)
    }

    fn step(&mut self, eps: f64, n_leapfrog: usize) -> Transition {
        let p0 = self.momentum();
        let eps = if self.jitter > 0.0 { eps * (1.0 + self.rng.random_range(-self.jitter..=self.jitter)) } else { eps };
        let h0 = -self.lp + self.metric.kinetic(&p0);
        let traj = leapfrog_metric(|q, g| self.target.log_density_grad(q, g), &self.q, &p0, eps, n_leapfrog, &self.metric);
        let u: f64 = self.rng.random();
        if traj.divergent {
            return Transition { accept_prob: 0.0, accepted: false, energy: f64::NAN, divergent: true };
        }
        let lp1 = self.target.log_density_grad(&traj.q, &mut self.scratch);
        let h1 = -lp1 + self.metric.kinetic(&traj.p);
        if !h1.is_finite() || (h1 - h0).abs() > DIVERGENCE_THRESHOLD {
            return Transition { accept_prob: 0.0, accepted: false, energy: h1, divergent: true };
        }
        let accept_prob = (h0 - h1).exp().min(1.0);
        let accepted = u < accept_prob;
        if accepted {
            self.q = traj.q;
            self.lp = lp1;
        }
        Transition { accept_prob, accepted, energy: h1, divergent: false }
    }

    /// Doubles or halves `eps` until the one-step acceptance probability
    /// crosses one half.
    fn reasonable_step(&mut self, mut eps: f64) -> f64 {
        let one_step = |s: &mut Self, eps: f64| {
            let p0 = s.momentum();
            let h0 = -s.lp + s.metric.kinetic(&p0);
            let traj = leapfrog_metric(|q, g| s.target.log_density_grad(q, g), &s.q, &p0, eps, 1, &s.metric);
            if traj.divergent {
                return f64::NEG_INFINITY;
            }
            let lp1 = s.target.log_density_grad(&traj.q, &mut s.scratch);
            let d = h0 - (-lp1 + s.metric.kinetic(&traj.p));
            if d.is_finite() { d } else { f64::NEG_INFINITY }
        };
        let up = one_step(self, eps) > -std::f64::consts::LN_2;
        for _ in 0..50 {
            let d = one_step(self, eps);
            if up != (d > -std::f64::consts::LN_2) {
                break;
            }
            eps = if up { eps * 2.0 } else { eps * 0.5 };
        }
        eps
    }
}

/// Uniform draws on `[-radius, radius]` until the density is finite.
pub fn random_init<T: LogDensity + ?Sized, R: Rng>(target: &T, rng: &mut R, radius: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; target.dim()];
    for _ in 0..MAX_INIT_TRIES {
        let q: Vec<f64> = (0..target.dim()).map(|_| if radius > 0.0 { rng.random_range(-radius..=radius) } else { 0.0 }).collect();
        if target.log_density_grad(&q, &mut g).is_finite() && g.iter().all(|x| x.is_finite()) {
            return Ok(q);
        }
    }
    Err(Error::Sampler(format!("log density not finite at {MAX_INIT_TRIES} random initial points")))
}

/// Generator for chain `chain_id`.
pub fn chain_rng(seed: u64, chain_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain_id);
    rng
}

/// Regularized `M⁻¹` from the draws of one adaptation window: variances
/// `(n/(n+5)) σ² + 10⁻³·5/(n+5)`. The dense estimate first shrinks the sample
/// covariance toward its diagonal with weight `dim/(n + dim)`.
pub fn estimate_metric(draws: &[Vec<f64>], dense: bool) -> Metric {
    let n = draws.len();
    let dim = draws.first().map_or(0, Vec::len);
    let nf = n as f64;
    let mean: Vec<f64> = (0..dim).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / nf).collect();
    let reg = |v: f64| (nf / (nf + 5.0)) * v + 1e-3 * (5.0 / (nf + 5.0));
    if !dense || n < 3 {
        let var = (0..dim).map(|i| reg(draws.iter().map(|d| (d[i] - mean[i]).powi(2)).sum::<f64>() / (nf - 1.0)));
        return Metric::Diagonal(var.collect());
    }
    let centered = DMatrix::from_fn(n, dim, |r, c| draws[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (nf - 1.0);
    let lambda = dim as f64 / (nf + dim as f64);
    let shrunk = DMatrix::from_fn(dim, dim, |i, j| {
        let c = if i == j { cov[(i, i)] } else { (1.0 - lambda) * cov[(i, j)] };
        if i == j { reg(c) } else { (nf / (nf + 5.0)) * c }
    });
    Metric::dense(shrunk).unwrap_or_else(|_| Metric::Diagonal((0..dim).map(|i| reg(cov[(i, i)])).collect()))
}

/// Mass adaptation windows `[start, end)` within a warmup of `warm`
/// iterations: an initial buffer of 75 and a terminal buffer of
/// `max(50, warm/5)` (15% and 10% when warmup is short), and slow windows in between starting at 25
/// iterations and doubling, the last one stretched to the terminal buffer.
pub fn mass_windows(warm: usize) -> Vec<(usize, usize)> {
    if warm < 20 {
        return Vec::new();
    }
    let (mut init, mut term, mut base) = (75, (warm / 5).max(50), 25);
    if init + term + base > warm {
        init = warm * 15 / 100;
        term = warm / 10;
        base = warm - init - term;
    }
    let end = warm - term;
    let mut out = Vec::new();
    let mut start = init;
    let mut size = base;
    while start < end {
        let mut stop = start + size;
        if stop + 2 * size > end {
            stop = end;
        }
        out.push((start, stop));
        start = stop;
        size *= 2;
    }
    out
}

/// Runs one chain. With `init = None` the start is drawn by [`random_init`]
/// from the chain's own stream.
///
/// Warmup adapts the step size by dual averaging throughout. When
/// `adapt_mass` is set, `M⁻¹` is reset to the regularized draw variances at
/// the end of each [`mass_windows`] window, after which the step size search
/// and dual averaging restart.
pub fn hmc_sample<T: LogDensity + ?Sized>(target: &T, config: &HmcConfig, chain_id: u64, init: Option<&[f64]>) -> Result<Chain> {
    let dim = target.dim();
    config.validate(dim)?;
    let mut rng = chain_rng(config.seed, chain_id);
    let q = match init {
        Some(q) if q.len() == dim => q.to_vec(),
        Some(q) => return Err(crate::error::dim_mismatch(format!("initial point of length {} for dimension {dim}", q.len()))),
        None => random_init(target, &mut rng, config.init_radius)?,
    };
    let mut scratch = vec![0.0; dim];
    let lp = target.log_density_grad(&q, &mut scratch);
    if !lp.is_finite() {
        return Err(Error::Sampler("log density is not finite at the initial point".into()));
    }
    let metric = Metric::Diagonal(match &config.mass {
        Some(m) => m.iter().map(|x| 1.0 / x).collect(),
        None => vec![1.0; dim],
    });
    let mut s = Sampler { target, rng, q, lp, metric, scratch, jitter: config.step_jitter };

    let warm = config.n_warmup;
    let mut eps = config.step_size;
    let mut warmup_divergences = 0;
    if warm > 0 {
        let windows = if config.adapt_mass { mass_windows(warm) } else { Vec::new() };
        let mut window = 0;
        let mut window_draws: Vec<Vec<f64>> = Vec::new();
        eps = s.reasonable_step(eps);
        let mut da = DualAveraging::new(eps, config.target_accept);
        for it in 0..warm {
            let t = s.step(eps, config.n_leapfrog);
            warmup_divergences += usize::from(t.divergent);
            eps = da.update(t.accept_prob);
            let Some(&(start, end)) = windows.get(window) else { continue };
            if it >= start {
                window_draws.push(s.q.clone());
            }
            if it + 1 == end {
                s.metric = estimate_metric(&window_draws, config.dense_mass);
                window_draws.clear();
                window += 1;
                eps = s.reasonable_step(eps);
                da = DualAveraging::new(eps, config.target_accept);
            }
        }
        if warmup_divergences == warm {
            return Err(Error::Sampler(format!(
                "chain {chain_id}: all {warm} warmup transitions diverged (last step size {eps:e}); \
                 check the model or lower step_size"
            )));
        }
        eps = da.final_step();
    }

    let n = config.n_draws;
    let mut chain = Chain {
        chain_id,
        draws: Vec::with_capacity(n),
        log_density: Vec::with_capacity(n),
        accept_flags: Vec::with_capacity(n),
        accept_prob: Vec::with_capacity(n),
        energies: Vec::with_capacity(n),
        divergent: Vec::with_capacity(n),
        adapted_step_size: eps,
        metric: Metric::Diagonal(Vec::new()),
        warmup_divergences,
    };
    for _ in 0..n {
        let t = s.step(eps, config.n_leapfrog);
        chain.draws.push(s.q.clone());
        chain.log_density.push(s.lp);
        chain.accept_flags.push(t.accepted);
        chain.accept_prob.push(t.accept_prob);
        chain.energies.push(t.energy);
        chain.divergent.push(t.divergent);
    }
    chain.metric = s.metric;
    Ok(chain)
}

/// Runs chains `0..n_chains` in parallel on the current rayon pool. Results
/// do not depend on the number of threads.
pub fn sample_chains<T: LogDensity + ?Sized>(
    target: &T,
    config: &HmcConfig,
    n_chains: usize,
    inits: Option<&[Vec<f64>]>,
) -> Result<Vec<Chain>> {
    if n_chains == 0 {
        return Err(Error::InvalidArgument("need at least one chain".into()));
    }
    if inits.is_some_and(|v| v.len() != n_chains) {
        return Err(Error::InvalidArgument("one initial point per chain is required".into()));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|c| hmc_sample(target, config, c as u64, inits.map(|v| v[c].as_slice())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn harmonic(q: &[f64], g: &mut [f64]) -> f64 {
        for (gi, qi) in g.iter_mut().zip(q) {
            *gi = -qi;
        }
        -0.5 * q.iter().map(|x| x * x).sum::<f64>()
    }

    fn std_normal(dim: usize) -> FnDensity<fn(&[f64], &mut [f64]) -> f64> {
        FnDensity { dim, f: harmonic }
    }

    #[test]
    fn mass_window_schedule() {
        assert_eq!(mass_windows(1000), vec![(75, 100), (100, 150), (150, 250), (250, 800)]);
        assert_eq!(mass_windows(10), vec![]);
        for warm in 20..3000 {
            let w = mass_windows(warm);
            assert!(!w.is_empty());
            assert!(w.windows(2).all(|p| p[0].1 == p[1].0 && p[0].0 < p[0].1));
            assert!(w.last().unwrap().1 < warm);
        }
    }

    fn energy(q: &[f64], p: &[f64]) -> f64 {
        0.5 * (q.iter().map(|x| x * x).sum::<f64>() + p.iter().map(|x| x * x).sum::<f64>())
    }

    #[test]
    fn harmonic_energy_error_is_second_order() {
        // max |ΔH| over one period, measured step by step
        let (q0, p0) = ([1.0], [0.5]);
        let h0 = energy(&q0, &p0);
        let mut cs = Vec::new();
        for eps in [0.1, 0.05, 0.025] {
            let steps = (2.0 * std::f64::consts::PI / eps).round() as usize;
            let (mut q, mut p) = (q0.to_vec(), p0.to_vec());
            let mut worst: f64 = 0.0;
            for _ in 0..steps {
                let t = leapfrog(harmonic, &q, &p, eps, 1, &[1.0]);
                (q, p) = (t.q, t.p);
                worst = worst.max((energy(&q, &p) - h0).abs());
            }
            cs.push(worst / (eps * eps));
        }
        assert!(cs.iter().all(|c| *c < 1.0), "{cs:?}");
        assert!((cs[0] / cs[2] - 1.0).abs() < 0.05, "{cs:?}");
    }

    #[test]
    fn leapfrog_is_reversible() {
        let q = [0.3, -1.2, 0.7];
        let p = [1.1, 0.2, -0.4];
        let m = [1.0, 2.0, 0.5];
        let fwd = leapfrog(harmonic, &q, &p, 0.1, 25, &m);
        let neg: Vec<f64> = fwd.p.iter().map(|x| -x).collect();
        let back = leapfrog(harmonic, &fwd.q, &neg, 0.1, 25, &m);
        for i in 0..3 {
            assert!((back.q[i] - q[i]).abs() < 1e-10);
            assert!((back.p[i] + p[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn tiny_step_moves_along_momentum() {
        let t = leapfrog(harmonic, &[0.4], &[1.5], 1e-7, 1, &[1.0]);
        assert!((t.q[0] - 0.4 - 1e-7 * 1.5).abs() < 1e-13);
    }

    #[test]
    fn divergence_stops_trajectory() {
        let f = |q: &[f64], g: &mut [f64]| {
            g[0] = -q[0];
            if q[0] > 1.0 { f64::NAN } else { -0.5 * q[0] * q[0] }
        };
        let t = leapfrog(f, &[0.0], &[10.0], 0.05, 100, &[1.0]);
        assert!(t.divergent);
        assert!(t.steps < 100);
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut da = DualAveraging::new(1.0, 0.8);
        let low = da.update(0.1);
        let mut da2 = DualAveraging::new(1.0, 0.8);
        let high = da2.update(1.0);
        assert!(low < high);
    }

    #[test]
    fn bivariate_normal_moments() {
        let target = std_normal(2);
        let config = HmcConfig { n_warmup: 500, n_draws: 2000, n_leapfrog: 10, seed: 3, ..Default::default() };
        let chains = sample_chains(&target, &config, 4, None).unwrap();
        for i in 0..2 {
            let x: Vec<f64> = chains.iter().flat_map(|c| c.coordinate(i)).collect();
            let d = crate::diagnostics::diagnostics(&chains).unwrap();
            let ess = d.ess[i];
            let m = mean(&x);
            let v = x.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
            assert!(m.abs() < 3.0 / ess.sqrt(), "mean {m}, ess {ess}");
            // Var(x²) = 2 for N(0, 1); the squares have their own ESS
            let sq: Vec<Vec<f64>> = chains.iter().map(|c| c.coordinate(i).iter().map(|y| y * y).collect()).collect();
            let ess_sq = crate::diagnostics::ess(&sq).unwrap();
            assert!((v - 1.0).abs() < 3.0 * (2.0 / ess_sq).sqrt(), "var {v}, ess {ess_sq}");
        }
        for c in &chains {
            let a = c.acceptance_rate();
            assert!((0.6..=0.95).contains(&a), "acceptance {a} step {} inv_mass {:?}", c.adapted_step_size, c.metric.diagonal());
        }
    }

    #[test]
    fn huge_step_without_adaptation_rejects() {
        let target = std_normal(3);
        let init = [0.1, -0.2, 0.3];
        let config = HmcConfig { step_size: 50.0, step_jitter: 0.0, n_warmup: 0, n_draws: 200, n_leapfrog: 5, ..Default::default() };
        let c = hmc_sample(&target, &config, 0, Some(&init)).unwrap();
        assert!(c.acceptance_rate() < 0.05);
        let moved = c.draws.iter().filter(|d| d.as_slice() != init).count();
        assert!(moved < 10);
    }

    #[test]
    fn seed_determinism() {
        let target = std_normal(4);
        let config = HmcConfig { n_warmup: 100, n_draws: 100, seed: 17, ..Default::default() };
        let a = hmc_sample(&target, &config, 2, None).unwrap();
        let b = hmc_sample(&target, &config, 2, None).unwrap();
        assert_eq!(a, b);
        let c = hmc_sample(&target, &config, 3, None).unwrap();
        assert_ne!(a.draws, c.draws);
        let par = sample_chains(&target, &config, 4, None).unwrap();
        assert_eq!(par[2], a);
    }

    #[test]
    fn all_divergent_warmup_aborts() {
        let target = FnDensity {
            dim: 1,
            f: |q: &[f64], g: &mut [f64]| {
                g[0] = 0.0;
                if q[0] == 0.0 { 0.0 } else { f64::NAN }
            },
        };
        let config = HmcConfig { n_warmup: 20, n_draws: 10, ..Default::default() };
        let err = hmc_sample(&target, &config, 0, Some(&[0.0])).unwrap_err();
        assert!(matches!(err, Error::Sampler(_)));
    }

    #[test]
    fn standard_normal_ks_distance() {
        let target = std_normal(1);
        let config = HmcConfig { n_warmup: 1000, n_draws: 10_000, n_leapfrog: 8, seed: 5, ..Default::default() };
        let c = hmc_sample(&target, &config, 0, None).unwrap();
        let mut x = c.coordinate(0);
        x.sort_by(f64::total_cmp);
        let nd = Normal::standard();
        let n = x.len() as f64;
        let ks = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = nd.cdf(*v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS distance {ks}");
    }

    #[test]
    fn median_energy_error_scales_quadratically() {
        let mut rng = chain_rng(1, 0);
        let mut pts = Vec::new();
        for eps in [0.2f64, 0.1, 0.05, 0.025] {
            let steps = (1.7 / eps).round() as usize;
            let mut errs: Vec<f64> = (0..200)
                .map(|_| {
                    let q: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                    let p: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                    let t = leapfrog(harmonic, &q, &p, eps, steps, &[1.0; 3]);
                    (energy(&t.q, &t.p) - energy(&q, &p)).abs()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            pts.push((f64::ln(eps), errs[errs.len() / 2].ln()));
        }
        let slope = log_log_slope(&pts);
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
    }

    pub(crate) fn log_log_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    }
}
