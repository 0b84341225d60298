//! Multi-chain effective sample size and split potential scale reduction.

use crate::error::{Error, Result};
use crate::hmc::Chain;

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// Mean Metropolis acceptance probability over all post-warmup draws.
    pub acceptance_rate: f64,
    /// Fraction of proposals actually accepted.
    pub accepted_fraction: f64,
    pub n_divergent: usize,
    /// Per coordinate, capped at the total number of draws.
    pub ess: Vec<f64>,
    /// Split potential scale reduction per coordinate; `NaN` when every draw
    /// of a coordinate is identical.
    pub rhat: Vec<f64>,
    /// Pairs of chains with bitwise-identical draws. Their agreement says
    /// nothing about convergence.
    pub duplicate_chains: Vec<(usize, usize)>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::NAN, f64::min)
    }

    /// No duplicated chains, no divergences and every split potential scale
    /// reduction below `rhat_max`.
    pub fn healthy(&self, rhat_max: f64) -> bool {
        self.duplicate_chains.is_empty() && self.n_divergent == 0 && self.rhat.iter().all(|r| *r < rhat_max)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size of equal-length chains from Geyer's initial
/// monotone sequence estimator on the combined autocorrelation.
pub fn ess(chains: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = check(chains)?;
    if n < 4 {
        return Ok((m * n) as f64);
    }
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / m as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = if m > 1 { var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return Ok(1.0);
    }
    let rho = |t: usize| {
        let acov = chains.iter().map(|c| autocov(c, t)).sum::<f64>() / m as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        t += 2;
    }
    let total = (m * n) as f64;
    Ok((total / tau.max(1.0 / total.log10().max(1.0))).min(total))
}

/// Split potential scale reduction: each chain is cut in two halves.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let (_, n) = check(chains)?;
    if n < 4 {
        return Err(Error::InvalidArgument("split potential scale reduction needs at least 4 draws per chain".into()));
    }
    let half = n / 2;
    let parts: Vec<&[f64]> = chains.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect();
    let w = parts.iter().map(|p| var(p)).sum::<f64>() / parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let b_over_n = var(&means);
    let hn = half as f64;
    let var_plus = (hn - 1.0) / hn * w + b_over_n;
    Ok((var_plus / w).sqrt())
}

fn check(chains: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = chains.first().map(Vec::len).ok_or(Error::Empty("chains"))?;
    if n == 0 {
        return Err(Error::Empty("chain draws"));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("chains must have equal length".into()));
    }
    Ok((chains.len(), n))
}

pub fn diagnostics(chains: &[Chain]) -> Result<Diagnostics> {
    let first = chains.first().ok_or(Error::Empty("chains"))?;
    if first.draws.is_empty() {
        return Err(Error::Empty("chain draws"));
    }
    let dim = first.draws[0].len();
    let all_prob: Vec<f64> = chains.iter().flat_map(|c| c.accept_prob.iter().copied()).collect();
    let n_acc = chains.iter().flat_map(|c| &c.accept_flags).filter(|a| **a).count();
    let mut ess_v = Vec::with_capacity(dim);
    let mut rhat_v = Vec::with_capacity(dim);
    for i in 0..dim {
        let coord: Vec<Vec<f64>> = chains.iter().map(|c| c.coordinate(i)).collect();
        ess_v.push(ess(&coord)?);
        rhat_v.push(if coord[0].len() >= 4 { split_rhat(&coord)? } else { f64::NAN });
    }
    let mut duplicate_chains = Vec::new();
    for a in 0..chains.len() {
        for b in a + 1..chains.len() {
            if chains[a].draws == chains[b].draws {
                duplicate_chains.push((a, b));
            }
        }
    }
    Ok(Diagnostics {
        acceptance_rate: mean(&all_prob),
        accepted_fraction: n_acc as f64 / all_prob.len() as f64,
        n_divergent: chains.iter().map(Chain::n_divergent).sum(),
        ess: ess_v,
        rhat: rhat_v,
        duplicate_chains,
    })
}
