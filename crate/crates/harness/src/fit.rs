//! Config-driven posterior runs.

use std::path::Path;

use argmin::core::{CostFunction, Executor, Gradient, IterState, State};
use argmin::solver::linesearch::condition::ArmijoCondition;
use argmin::solver::linesearch::{BacktrackingLineSearch, MoreThuenteLineSearch};
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sckpd::diagnostics::diagnostics;
use sckpd::dynamic::{Propagation, SdPosterior, SeasonSchedule};
use sckpd::geometry::cholesky_dense;
use sckpd::hmc::{chain_rng, sample_chains, Chain};
use sckpd::hyperprior::{solve_hyper, PriorTargets, ShapeKind, SolvedHyper};
use sckpd::model::{DataSummary, Layout, LogDensity, SckpdParams, SckpdPosterior};

use crate::config::{BoundaryPolicy, InitKind, Mode, RunConfig, TargetSource};
use crate::data::{ingest_csv, Dataset};
use crate::error::{HarnessError, Result};
use crate::simulate::{matrix_stats, sorted};
use crate::summary::{block_prefix, summarize, DrawTable, PosteriorSummary, META_COLUMNS};

/// Largest tolerated deviation of a fitted `Ω` from the simplex.
pub const SIMPLEX_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperReport {
    pub source: TargetSource,
    pub gamma_d: f64,
    pub f_d: f64,
    pub f_l: f64,
    pub c1: f64,
    pub c2: f64,
    pub a1: f64,
    pub a2: f64,
    pub rate1: f64,
    pub rate2: f64,
    pub beta: f64,
    pub epsilon_residual: f64,
    pub boundary1: bool,
    pub boundary2: bool,
}

/// Covariance of the rows used for the prior targets: all rows for static
/// data, the season-1 rows of every cycle for seasonal data.
fn target_covariance(cfg: &RunConfig, data: &Dataset) -> Result<DMatrix<f64>> {
    let y = match &data.blocks {
        Some(labels) if cfg.seasons * cfg.cycles > 1 => {
            let rows: Vec<usize> = (0..data.n()).filter(|&i| labels[i].1 == 1).collect();
            if rows.is_empty() {
                return Err(HarnessError::Fit("no season-1 observations for the prior targets".into()));
            }
            data.y.select_rows(rows.iter())
        }
        _ => data.y.clone(),
    };
    Ok(y.transpose() * &y / y.nrows() as f64)
}

pub fn prior_targets(cfg: &RunConfig, data: &Dataset) -> Result<PriorTargets> {
    let s = target_covariance(cfg, data)?;
    let chol = |m: &DMatrix<f64>, what: &str| {
        cholesky_dense(m).map_err(|e| {
            HarnessError::Fit(format!(
                "Cholesky factorization of the {what} failed ({e}); the sample covariance is likely rank deficient"
            ))
        })
    };
    let l = match cfg.model.target_source {
        TargetSource::Covariance => chol(&s, "sample covariance")?,
        TargetSource::Precision => {
            let inv = s.clone().cholesky().map(|c| c.inverse());
            chol(&inv.ok_or_else(|| HarnessError::Fit("sample covariance is singular".into()))?, "sample precision")?
        }
    };
    Ok(PriorTargets::from_cholesky(&l, cfg.d1, cfg.d2)?)
}

pub fn hyper_report(cfg: &RunConfig, t: &PriorTargets, h: &SolvedHyper) -> HyperReport {
    HyperReport {
        source: cfg.model.target_source,
        gamma_d: t.gamma_d,
        f_d: t.f_d,
        f_l: t.f_l,
        c1: t.shape_constant(1),
        c2: t.shape_constant(2),
        a1: h.a1,
        a2: h.a2,
        rate1: h.rate1,
        rate2: h.rate2,
        beta: h.beta,
        epsilon_residual: h.epsilon_residual,
        boundary1: h.kind1 == ShapeKind::Boundary,
        boundary2: h.kind2 == ShapeKind::Boundary,
    }
}

/// Targets and hyperparameters, enforcing the boundary policy.
pub fn solve_for(cfg: &RunConfig, data: &Dataset) -> Result<(PriorTargets, SolvedHyper, HyperReport)> {
    let t = prior_targets(cfg, data)?;
    let h = solve_hyper(&t, cfg.model.hyper_tol)?;
    let report = hyper_report(cfg, &t, &h);
    if cfg.model.boundary_policy == BoundaryPolicy::Error && (report.boundary1 || report.boundary2) {
        return Err(HarnessError::Fit(format!(
            "shape equation has no root (c1 = {:.6}, c2 = {:.6}; a root needs c > 1); \
             set model.boundary_policy = \"allow\" to fit with the boundary shape",
            report.c1, report.c2
        )));
    }
    Ok((t, h, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub ess: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub acceptance_rate: f64,
    pub accepted_fraction: f64,
    pub n_divergent: usize,
    pub warmup_divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub duplicate_chains: Vec<(usize, usize)>,
    /// Log density at each chain's start when the harness chose it.
    pub init_log_density: Vec<f64>,
    /// Largest `|Σ Ω − 1|` or negative entry over all draws and blocks.
    pub max_simplex_error: f64,
    pub parameters: Vec<ParameterDiagnostics>,
}

pub struct FitOutput {
    pub draws: DrawTable,
    pub summary: PosteriorSummary,
    pub diagnostics: DiagnosticsReport,
    pub hyper: HyperReport,
    pub chains: Vec<Chain>,
}

fn stat_columns(prefix: &str, k: usize, out: &mut Vec<String>) {
    out.extend(["log_det", "diag_fro2", "lower_fro2"].iter().map(|c| format!("{prefix}{c}")));
    out.extend((1..=k).map(|j| format!("{prefix}omega_sorted_{j}")));
}

fn stat_values(p: &SckpdParams, out: &mut Vec<f64>) -> f64 {
    let (ld, df, lf) = matrix_stats(p);
    out.extend([ld, df, lf]);
    out.extend(sorted(p.omega.as_slice()));
    let neg = p.omega.iter().fold(0.0f64, |m, w| m.max(-w));
    (p.omega.sum() - 1.0).abs().max(neg)
}

/// `log D₁ ⊕ log D₂` least-squares fit to `−½ log diag(s)`, the diagonal
/// precision factor that maximizes the likelihood when every lower is zero.
/// The grand mean is split evenly between the modes.
pub fn diagonal_start(s: &DMatrix<f64>, d1: usize, d2: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if s.diagonal().iter().any(|v| !(*v > 0.0)) {
        return Err(HarnessError::Fit("sample covariance has a nonpositive diagonal entry".into()));
    }
    let logs = DMatrix::from_fn(d1, d2, |r, v| -0.5 * s[(d2 * r + v, d2 * r + v)].ln());
    let grand = logs.mean();
    let a = DVector::from_fn(d1, |r, _| logs.row(r).mean() - 0.5 * grand);
    let b = DVector::from_fn(d2, |v, _| logs.column(v).mean() - 0.5 * grand);
    Ok((a, b))
}

struct NegLogDensity<'a, T>(&'a T);

type OptimizationResult<P, S> =
    argmin::core::OptimizationResult<P, S, IterState<Vec<f64>, Vec<f64>, (), (), (), f64>>;

impl<T: LogDensity> CostFunction for NegLogDensity<'_, T> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let mut g = vec![0.0; x.len()];
        let v = -self.0.log_density_grad(x, &mut g);
        Ok(if v.is_finite() { v } else { f64::MAX })
    }
}

impl<T: LogDensity> Gradient for NegLogDensity<'_, T> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        let mut g = vec![0.0; x.len()];
        self.0.log_density_grad(x, &mut g);
        Ok(g.iter().map(|v| -v).collect())
    }
}

fn lbfgs_run<T: LogDensity>(target: &T, x0: &[f64], max_iters: u64, backtracking: bool) -> Option<(Vec<f64>, u64)> {
    fn best<P, S>(r: std::result::Result<OptimizationResult<P, S>, argmin::core::Error>) -> Option<(Vec<f64>, u64)> {
        let r = r.ok()?;
        let st = r.state();
        st.get_best_param().cloned().map(|p| (p, st.get_iter()))
    }
    let problem = NegLogDensity(target);
    if backtracking {
        let ls = BacktrackingLineSearch::new(ArmijoCondition::new(1e-4).ok()?);
        best(Executor::new(problem, LBFGS::new(ls, 10)).configure(|s| s.param(x0.to_vec()).max_iters(max_iters)).run())
    } else {
        let ls = MoreThuenteLineSearch::new();
        best(Executor::new(problem, LBFGS::new(ls, 10)).configure(|s| s.param(x0.to_vec()).max_iters(max_iters)).run())
    }
}

/// Moves `x0` uphill with L-BFGS for at most `max_iters` iterations in total,
/// restarting from the best point whenever the line search gives up and
/// switching to a backtracking line search when a restart makes no progress.
pub fn climb<T: LogDensity>(target: &T, x0: Vec<f64>, max_iters: u64) -> Vec<f64> {
    let value = |x: &[f64]| {
        let v = target.log_density_grad(x, &mut vec![0.0; x.len()]);
        if v.is_finite() { v } else { f64::NEG_INFINITY }
    };
    let mut best = x0;
    let mut best_v = value(&best);
    let mut used = 0;
    let mut backtracking = false;
    while used < max_iters {
        let Some((x, iters)) = lbfgs_run(target, &best, max_iters - used, backtracking) else { break };
        used += iters.max(1);
        let v = value(&x);
        if v > best_v + 1e-9 * best_v.abs().max(1.0) {
            best = x;
            best_v = v;
        } else if backtracking {
            break;
        } else {
            backtracking = true;
        }
    }
    best
}

/// Initial points (random stream `2^32 + chain` of the run seed), or `None`
/// for the sampler's own random initialization.
fn initial_points<T: LogDensity>(
    cfg: &RunConfig,
    data: &Dataset,
    target: &T,
    base: &Layout,
) -> Result<Option<Vec<Vec<f64>>>> {
    if cfg.hmc.init == InitKind::Random {
        return Ok(None);
    }
    let dim = target.dim();
    let (a, b) = diagonal_start(&target_covariance(cfg, data)?, cfg.d1, cfg.d2)?;
    let points = (0..cfg.hmc.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = chain_rng(cfg.seed, (1 << 32) + c as u64);
            let mut x = vec![0.0; dim];
            x[base.log_d1()..base.log_d1() + cfg.d1].copy_from_slice(a.as_slice());
            x[base.log_d2()..base.log_d2() + cfg.d2].copy_from_slice(b.as_slice());
            let j = cfg.hmc.init_jitter;
            if j > 0.0 {
                for v in &mut x {
                    *v += rng.random_range(-j..=j);
                }
            }
            if cfg.hmc.init == InitKind::Mode {
                x = climb(target, x, cfg.hmc.init_opt_iters);
            }
            x
        })
        .collect();
    Ok(Some(points))
}

/// Samples the configured posterior and tabulates every draw.
fn run_chains<T: LogDensity>(
    cfg: &RunConfig,
    target: &T,
    inits: Option<Vec<Vec<f64>>>,
    names: Vec<String>,
    columns: Vec<String>,
    row_stats: impl Fn(&[f64], &mut Vec<f64>) -> Result<f64> + Sync,
) -> Result<(Vec<Chain>, DrawTable, DiagnosticsReport)> {
    let hmc = cfg.hmc.to_core(cfg.seed);
    let init_log_density = inits
        .iter()
        .flatten()
        .map(|x| target.log_density_grad(x, &mut vec![0.0; x.len()]))
        .collect();
    let chains = sample_chains(target, &hmc, cfg.hmc.chains, inits.as_deref())?;
    let mut table = DrawTable::new(columns);
    let per_chain: Vec<Result<(Vec<Vec<f64>>, f64)>> = chains
        .par_iter()
        .map(|c| {
            let mut rows = Vec::with_capacity(c.draws.len());
            let mut worst = 0.0f64;
            for (i, x) in c.draws.iter().enumerate() {
                let mut row = vec![
                    c.chain_id as f64,
                    i as f64,
                    c.log_density[i],
                    c.accept_prob[i],
                    if c.divergent[i] { 1.0 } else { 0.0 },
                ];
                worst = worst.max(row_stats(x, &mut row)?);
                rows.push(row);
            }
            Ok((rows, worst))
        })
        .collect();
    let mut max_simplex_error = 0.0f64;
    for r in per_chain {
        let (rows, worst) = r?;
        table.rows.extend(rows);
        max_simplex_error = max_simplex_error.max(worst);
    }
    let d = diagnostics(&chains)?;
    let report = DiagnosticsReport {
        acceptance_rate: d.acceptance_rate,
        accepted_fraction: d.accepted_fraction,
        n_divergent: d.n_divergent,
        warmup_divergences: chains.iter().map(|c| c.warmup_divergences).collect(),
        step_sizes: chains.iter().map(|c| c.adapted_step_size).collect(),
        max_rhat: d.max_rhat(),
        min_ess: d.min_ess(),
        duplicate_chains: d.duplicate_chains.clone(),
        init_log_density,
        max_simplex_error,
        parameters: names
            .into_iter()
            .zip(d.ess.iter().zip(&d.rhat))
            .map(|(name, (ess, rhat))| ParameterDiagnostics { name, ess: *ess, rhat: *rhat })
            .collect(),
    };
    if max_simplex_error > SIMPLEX_TOL {
        return Err(HarnessError::Fit(format!("a posterior draw of Omega is off the simplex by {max_simplex_error:e}")));
    }
    Ok((chains, table, report))
}

fn base_columns(k: usize) -> Vec<String> {
    let mut cols: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.push("theta".into());
    stat_columns("", k, &mut cols);
    cols
}

pub fn fit_static(cfg: &RunConfig, data: &Dataset) -> Result<FitOutput> {
    let (targets, hyper, report) = solve_for(cfg, data)?;
    let summary = DataSummary::from_observations(&data.y, cfg.d1, cfg.d2)?;
    let post = SckpdPosterior::new(summary, hyper, targets, cfg.k, cfg.model.lower_param.into())?;
    let inits = initial_points(cfg, data, &post, &post.layout)?;
    let (chains, draws, diagnostics) =
        run_chains(cfg, &post, inits, post.layout.names(), base_columns(cfg.k), |x, row| {
            let p = post.params(x)?;
            row.push(p.theta);
            Ok(stat_values(&p, row))
        })?;
    Ok(FitOutput { summary: summarize(&draws)?, draws, diagnostics, hyper: report, chains })
}

pub fn fit_dynamic(cfg: &RunConfig, data: &Dataset) -> Result<FitOutput> {
    let (targets, hyper, report) = solve_for(cfg, data)?;
    let blocks = data
        .block_matrices(cfg.seasons, cfg.cycles)?
        .iter()
        .map(|y| DataSummary::from_observations(y, cfg.d1, cfg.d2))
        .collect::<sckpd::Result<Vec<_>>>()?;
    let schedule = SeasonSchedule::new(cfg.seasons, cfg.cycles, blocks)?;
    let prop = Propagation::single(cfg.seasons, cfg.model.exponent.into());
    let mut post = SdPosterior::new(schedule, prop, hyper, targets, cfg.k, cfg.model.lower_param.into())?;
    post.gamma_shape = cfg.model.transition_alpha;
    let mut cols = base_columns(cfg.k);
    let nb = cfg.seasons * cfg.cycles;
    for b in 0..nb {
        stat_columns(&block_prefix(b / cfg.seasons + 1, b % cfg.seasons + 1), cfg.k, &mut cols);
    }
    let inits = initial_points(cfg, data, &post, &post.layout.base)?;
    let (chains, draws, diagnostics) = run_chains(cfg, &post, inits, post.layout.names(), cols, |x, row| {
        let p = post.params(x)?;
        row.push(p.base.theta);
        let mut worst = stat_values(&p.block_params(0, cfg.seasons)?, row);
        for b in 0..nb {
            worst = worst.max(stat_values(&p.block_params(b, cfg.seasons)?, row));
        }
        Ok(worst)
    })?;
    Ok(FitOutput { summary: summarize(&draws)?, draws, diagnostics, hyper: report, chains })
}

pub fn fit(cfg: &RunConfig, data: &Dataset) -> Result<FitOutput> {
    if (data.d1, data.d2) != (cfg.d1, cfg.d2) {
        return Err(HarnessError::Config(format!(
            "data has dims ({}, {}) but the config asks for ({}, {})",
            data.d1, data.d2, cfg.d1, cfg.d2
        )));
    }
    if cfg.seasons * cfg.cycles > 1 { fit_dynamic(cfg, data) } else { fit_static(cfg, data) }
}

pub fn load_input(cfg: &RunConfig, mode: Mode) -> Result<Dataset> {
    let path = cfg.input.as_ref().ok_or_else(|| HarnessError::Config("fit modes need an input CSV".into()))?;
    let mut data = ingest_csv(path, cfg.d1, cfg.d2, mode.is_dynamic())?;
    if cfg.center {
        data.center();
    }
    Ok(data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| HarnessError::io(path, e))
}

/// Writes `draws.csv`, `summary.json`, `diagnostics.json` and `hyper.json`.
pub fn write_fit(out: &FitOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    out.draws.write_csv(&dir.join("draws.csv"))?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    write_json(&dir.join("diagnostics.json"), &out.diagnostics)?;
    write_json(&dir.join("hyper.json"), &out.hyper)
}
