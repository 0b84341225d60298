//! Data-generating processes for the static and seasonal models.
//!
//! Random stream layout (all `ChaCha8`, seeded with `seed_from_u64(seed)`):
//! stream 0 draws the true parameters in the order diagonals, transition
//! matrix, lowers (block by block, component by component, mode 1 before
//! mode 2); stream 1 draws the standard normal vectors behind the
//! observations, block by block.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use sckpd::dynamic::{Propagation, StochasticMatrix};
use sckpd::geometry::CholFactor;
use sckpd::hmc::chain_rng;
use sckpd::model::{assemble_ldagger, SckpdParams};

use crate::config::{Mode, RunConfig, TransitionKind};
use crate::data::Dataset;
use crate::error::{HarnessError, Result};

/// Matrix summaries shared by ground-truth files (`T = f64`) and posterior
/// summaries (`T` = quantiles).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct Stats<T> {
    /// Ascending.
    pub omega_sorted: Vec<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<T>,
    pub log_det: T,
    pub diag_fro2: T,
    pub lower_fro2: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Deserialize<'de>"))]
pub struct BlockStats<T> {
    pub cycle: usize,
    pub season: usize,
    pub stats: Stats<T>,
}

/// How the Wishart scale vectors were attached to the modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagAudit {
    pub mode1_dim: usize,
    pub mode1_scale: Vec<f64>,
    pub mode1_df: usize,
    pub mode2_dim: usize,
    pub mode2_scale: Vec<f64>,
    pub mode2_df: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kind: String,
    pub preset: Option<String>,
    pub seed: u64,
    pub d1: usize,
    pub d2: usize,
    /// True number of components.
    pub r: usize,
    /// Observations per block.
    pub n: usize,
    pub seasons: usize,
    pub cycles: usize,
    pub beta: f64,
    /// True weights (of the first block for seasonal data), unsorted.
    pub omega: Vec<f64>,
    pub d1_diag: Vec<f64>,
    pub d2_diag: Vec<f64>,
    /// Rows of the column-stochastic transition matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    /// Statistics of the (first) block.
    pub stats: Stats<f64>,
    /// Every block in time order; empty for static data.
    #[serde(default)]
    pub blocks: Vec<BlockStats<f64>>,
    pub audit: DiagAudit,
}

pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `log|L†|`, `‖𝔻(L†)‖²` and `‖⌊L†⌋‖²` of `p`.
pub fn matrix_stats(p: &SckpdParams) -> (f64, f64, f64) {
    let l = assemble_ldagger(p);
    let d = l.diag().norm_squared();
    (l.log_det(), d, l.strict_lower().norm_squared())
}

fn stats_of(p: &SckpdParams) -> Stats<f64> {
    let (log_det, diag_fro2, lower_fro2) = matrix_stats(p);
    Stats { omega_sorted: sorted(p.omega.as_slice()), theta: None, log_det, diag_fro2, lower_fro2 }
}

/// Diagonal of a `W(df, diag(scale))` draw: `scale_j χ²_df`.
fn wishart_diagonal(rng: &mut ChaCha8Rng, scale: &[f64], df: usize) -> DVector<f64> {
    let chi = ChiSquared::new(df as f64).expect("df > 0");
    DVector::from_iterator(scale.len(), scale.iter().map(|s| s * chi.sample(rng)))
}

/// `Dirichlet(α 1_k)` through log-gammas, so tiny `α` does not underflow
/// before normalization: `log G = log Γ(α+1) draw + log U / α`.
pub fn dirichlet_log_space(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.sample(rng).ln() + u.ln() / alpha
        })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    logs.iter().map(|l| (l - m).exp() / z).collect()
}

fn random_lower(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for i in 1..d {
        for j in 0..i {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = sd * z;
        }
    }
    m
}

/// `n` draws of `y = L†⁻ᵀ z`, so the precision of `y` is `L†L†ᵀ`.
fn observations(rng: &mut ChaCha8Rng, l: &CholFactor, n: usize) -> DMatrix<f64> {
    let d = l.dim();
    let z = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = l.matrix().tr_solve_lower_triangular(&z).expect("positive diagonal");
    y.transpose()
}

fn diag_scales(cfg: &RunConfig) -> (Vec<f64>, Vec<f64>) {
    let s = &cfg.simulation;
    (
        s.diag_scale1.clone().unwrap_or_else(|| vec![1.0; cfg.d1]),
        s.diag_scale2.clone().unwrap_or_else(|| vec![1.0; cfg.d2]),
    )
}

fn audit(cfg: &RunConfig, s1: &[f64], s2: &[f64]) -> DiagAudit {
    DiagAudit {
        mode1_dim: cfg.d1,
        mode1_scale: s1.to_vec(),
        mode1_df: cfg.d1 + 2,
        mode2_dim: cfg.d2,
        mode2_scale: s2.to_vec(),
        mode2_df: cfg.d2 + 2,
        note: "each mode takes the scale vector whose length equals its dimension; \
               modes without a configured vector use all ones"
            .into(),
    }
}

pub struct Simulated {
    pub data: Dataset,
    pub truth: GroundTruth,
}

pub fn simulate_static(cfg: &RunConfig) -> Result<Simulated> {
    cfg.validate(Mode::SimulateStatic)?;
    let s = &cfg.simulation;
    let total: f64 = s.omega_u.iter().sum();
    let omega: Vec<f64> = s.omega_u.iter().map(|w| w / total).collect();
    let (s1, s2) = diag_scales(cfg);
    let mut prng = chain_rng(cfg.seed, 0);
    let d1_diag = wishart_diagonal(&mut prng, &s1, cfg.d1 + 2);
    let d2_diag = wishart_diagonal(&mut prng, &s2, cfg.d2 + 2);
    let (mut lowers1, mut lowers2) = (Vec::new(), Vec::new());
    for w in &omega {
        let sd = (w * s.beta).sqrt();
        lowers1.push(random_lower(&mut prng, cfg.d1, sd));
        lowers2.push(random_lower(&mut prng, cfg.d2, sd));
    }
    let p = SckpdParams {
        lowers1,
        lowers2,
        d1_diag: d1_diag.clone(),
        d2_diag: d2_diag.clone(),
        omega: DVector::from_vec(omega.clone()),
        theta: 0.5,
    };
    let l = assemble_ldagger(&p);
    let y = observations(&mut chain_rng(cfg.seed, 1), &l, cfg.n);
    Ok(Simulated {
        data: Dataset { d1: cfg.d1, d2: cfg.d2, y, blocks: None },
        truth: GroundTruth {
            kind: "static".into(),
            preset: cfg.preset.clone(),
            seed: cfg.seed,
            d1: cfg.d1,
            d2: cfg.d2,
            r: omega.len(),
            n: cfg.n,
            seasons: 1,
            cycles: 1,
            beta: s.beta,
            omega,
            d1_diag: d1_diag.iter().copied().collect(),
            d2_diag: d2_diag.iter().copied().collect(),
            transition: None,
            stats: stats_of(&p),
            blocks: Vec::new(),
            audit: audit(cfg, &s1, &s2),
        },
    })
}

pub fn simulate_dynamic(cfg: &RunConfig) -> Result<Simulated> {
    cfg.validate(Mode::SimulateDynamic)?;
    let s = &cfg.simulation;
    let r = s.omega_u.len();
    let total: f64 = s.omega_u.iter().sum();
    let omega1 = DVector::from_iterator(r, s.omega_u.iter().map(|w| w / total));
    let (s1, s2) = diag_scales(cfg);
    let mut prng = chain_rng(cfg.seed, 0);
    let d1_diag = wishart_diagonal(&mut prng, &s1, cfg.d1 + 2);
    let d2_diag = wishart_diagonal(&mut prng, &s2, cfg.d2 + 2);
    let a = match s.transition {
        TransitionKind::Identity => StochasticMatrix::identity(r),
        TransitionKind::Dirichlet => {
            let mut a = DMatrix::zeros(r, r);
            for j in 0..r {
                for (i, v) in dirichlet_log_space(&mut prng, r, s.dirichlet_alpha).into_iter().enumerate() {
                    a[(i, j)] = v;
                }
            }
            StochasticMatrix::new(a)?
        }
    };
    let prop = Propagation::single(cfg.seasons, cfg.model.exponent.into());
    let nb = cfg.seasons * cfg.cycles;
    let states = prop.states(std::slice::from_ref(&a), &omega1, prop.n_states(nb, cfg.seasons), cfg.seasons)?;

    let mut orng = chain_rng(cfg.seed, 1);
    let d = cfg.d1 * cfg.d2;
    let mut y = DMatrix::zeros(nb * cfg.n, d);
    let mut labels = Vec::with_capacity(nb * cfg.n);
    let mut blocks = Vec::with_capacity(nb);
    for b in 0..nb {
        let (c, season) = (b / cfg.seasons + 1, b % cfg.seasons + 1);
        let omega = states[prop.state_of_block(b, cfg.seasons)].clone();
        let (mut lowers1, mut lowers2) = (Vec::new(), Vec::new());
        for w in omega.iter() {
            let sd = (w * s.beta).sqrt();
            lowers1.push(random_lower(&mut prng, cfg.d1, sd));
            lowers2.push(random_lower(&mut prng, cfg.d2, sd));
        }
        let p = SckpdParams { lowers1, lowers2, d1_diag: d1_diag.clone(), d2_diag: d2_diag.clone(), omega, theta: 0.5 };
        let obs = observations(&mut orng, &assemble_ldagger(&p), cfg.n);
        y.rows_mut(b * cfg.n, cfg.n).copy_from(&obs);
        labels.extend(std::iter::repeat_n((c, season), cfg.n));
        blocks.push(BlockStats { cycle: c, season, stats: stats_of(&p) });
    }
    for blk in &blocks {
        let sum: f64 = blk.stats.omega_sorted.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(HarnessError::Fit(format!("true weights of block ({}, {}) sum to {sum}", blk.cycle, blk.season)));
        }
    }
    Ok(Simulated {
        data: Dataset { d1: cfg.d1, d2: cfg.d2, y, blocks: Some(labels) },
        truth: GroundTruth {
            kind: "dynamic".into(),
            preset: cfg.preset.clone(),
            seed: cfg.seed,
            d1: cfg.d1,
            d2: cfg.d2,
            r,
            n: cfg.n,
            seasons: cfg.seasons,
            cycles: cfg.cycles,
            beta: s.beta,
            omega: omega1.iter().copied().collect(),
            d1_diag: d1_diag.iter().copied().collect(),
            d2_diag: d2_diag.iter().copied().collect(),
            transition: Some(a.matrix().row_iter().map(|row| row.iter().copied().collect()).collect()),
            stats: blocks[0].stats.clone(),
            blocks,
            audit: audit(cfg, &s1, &s2),
        },
    })
}

/// Writes `data.csv` and `truth.json` into the output directory.
pub fn write_simulation(sim: &Simulated, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    sim.data.write_csv(&dir.join("data.csv"))?;
    let path = dir.join("truth.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sim.truth)?).map_err(|e| HarnessError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(overrides: &[&str]) -> RunConfig {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::from_layers(None, &o).unwrap()
    }

    #[test]
    fn paper_static_preset_shapes() {
        let sim = simulate_static(&cfg(&["preset=paper-static", "seed=3"])).unwrap();
        assert_eq!(sim.data.y.shape(), (500, 20));
        assert_eq!(sim.truth.r, 5);
        assert!((sim.truth.omega[4] - 9.0 / 27.0).abs() < 1e-15);
        assert_eq!(sim.truth.audit.mode1_scale, crate::config::WISHART_SCALE_4.to_vec());
        assert_eq!(sim.truth.audit.mode1_df, 6);
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = cfg(&["preset=paper-static", "seed=11", "n=20"]);
        let a = simulate_static(&c).unwrap();
        let b = simulate_static(&c).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
        let other = simulate_static(&cfg(&["preset=paper-static", "seed=12", "n=20"])).unwrap();
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn sample_precision_approaches_truth() {
        let c = cfg(&["d1=2", "d2=3", "n=40000", "simulation.omega_u=[1.0, 2.0]"]);
        let sim = simulate_static(&c).unwrap();
        let y = &sim.data.y;
        let cov = y.transpose() * y / y.nrows() as f64;
        let prec = cov.try_inverse().unwrap();
        // precision of y is L†L†ᵀ
        let logdet = prec.determinant().ln();
        assert!((logdet - 2.0 * sim.truth.stats.log_det).abs() < 0.1, "{logdet} vs {}", 2.0 * sim.truth.stats.log_det);
    }

    #[test]
    fn dynamic_blocks_on_simplex() {
        let sim = simulate_dynamic(&cfg(&["preset=paper-dynamic", "n=10"])).unwrap();
        assert_eq!(sim.truth.blocks.len(), 12);
        for b in &sim.truth.blocks {
            assert!((b.stats.omega_sorted.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = sim.truth.transition.as_ref().unwrap();
        for j in 0..5 {
            assert!(((0..5).map(|i| a[i][j]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(sim.data.blocks.as_ref().unwrap()[10], (1, 2));
    }

    #[test]
    fn identity_transition_keeps_weights() {
        let sim = simulate_dynamic(&cfg(&["preset=paper-dynamic", "n=5", "simulation.transition=identity"])).unwrap();
        for b in &sim.truth.blocks {
            assert_eq!(b.stats.omega_sorted, sim.truth.blocks[0].stats.omega_sorted);
        }
    }

    #[test]
    fn dirichlet_small_alpha_is_finite() {
        let mut rng = chain_rng(1, 0);
        for _ in 0..1000 {
            let w = dirichlet_log_space(&mut rng, 5, 0.05);
            assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_means() {
        let mut rng = chain_rng(2, 0);
        let n = 20_000;
        let alpha = 0.3;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            for (i, w) in dirichlet_log_space(&mut rng, 4, alpha).into_iter().enumerate() {
                sum[i] += w;
                sq[i] += w * w;
            }
        }
        for i in 0..4 {
            let m = sum[i] / n as f64;
            let se = ((sq[i] / n as f64 - m * m) / n as f64).sqrt();
            assert!((m - 0.25).abs() < 3.0 * se);
        }
    }
}
