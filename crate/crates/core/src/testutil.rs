//! Random fixtures shared by the unit tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::{CholFactor, SpdMatrix};
use crate::hyperprior::{solve_hyper, PriorTargets, SolvedHyper};
use crate::model::{DataSummary, LogDensity, SckpdParams};

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn random_symmetric<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let m = random_matrix(rng, d, d);
    (&m + m.transpose()) * 0.5
}

pub fn random_chol<R: Rng>(rng: &mut R, d: usize) -> CholFactor {
    let mut l = random_matrix(rng, d, d).lower_triangle();
    for i in 0..d {
        l[(i, i)] = rng.random_range(0.3..2.5);
    }
    CholFactor::new(l).unwrap()
}

pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> SpdMatrix {
    let m = random_chol(rng, d).reconstruct();
    SpdMatrix::new((&m + m.transpose()) * 0.5).unwrap()
}

pub fn random_lower<R: Rng>(rng: &mut R, d: usize, scale: f64) -> DMatrix<f64> {
    crate::geometry::strict_lower_part(&(random_matrix(rng, d, d) * scale))
}

pub fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> DVector<f64> {
    let w = DVector::from_fn(k, |_, _| rng.random_range(0.05..1.0));
    let s = w.sum();
    w / s
}

pub fn random_params<R: Rng>(rng: &mut R, d1: usize, d2: usize, k: usize) -> SckpdParams {
    SckpdParams {
        lowers1: (0..k).map(|_| random_lower(rng, d1, 0.6)).collect(),
        lowers2: (0..k).map(|_| random_lower(rng, d2, 0.6)).collect(),
        d1_diag: DVector::from_fn(d1, |_, _| rng.random_range(0.4..2.0)),
        d2_diag: DVector::from_fn(d2, |_, _| rng.random_range(0.4..2.0)),
        omega: random_simplex(rng, k),
        theta: rng.random_range(0.05..0.95),
    }
}

pub fn random_data<R: Rng>(rng: &mut R, d1: usize, d2: usize, n: usize) -> DataSummary {
    let y = random_matrix(rng, n, d1 * d2);
    DataSummary::from_observations(&y, d1, d2).unwrap()
}

/// Targets from a random factor whose diagonal is spread enough for both
/// shape equations to have roots.
pub fn random_targets<R: Rng>(rng: &mut R, d1: usize, d2: usize) -> (PriorTargets, SolvedHyper) {
    loop {
        let d = d1 * d2;
        let mut l = random_lower(rng, d, 0.5);
        for i in 0..d {
            l[(i, i)] = rng.random_range(-1.5f64..1.5).exp();
        }
        let l = CholFactor::new(l).unwrap();
        let t = PriorTargets::from_cholesky(&l, d1, d2).unwrap();
        if t.shape_constant(1) > 1.05 && t.shape_constant(2) > 1.05 {
            let h = solve_hyper(&t, 1e-10).unwrap();
            return (t, h);
        }
    }
}

/// Central finite-difference check of the analytic gradient.
pub fn fd_check(f: &dyn LogDensity, x: &[f64], tag: &str) {
    let mut g = vec![0.0; x.len()];
    let v = f.log_density_grad(x, &mut g);
    assert!(v.is_finite());
    let mut scratch = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        let fd = (f.log_density_grad(&xp, &mut scratch) - f.log_density_grad(&xm, &mut scratch)) / (2.0 * h);
        let err = (fd - g[i]).abs();
        assert!(
            err < 1e-5 * g[i].abs().max(fd.abs()) || err < 1e-7 * v.abs().max(1.0),
            "{tag}: coordinate {i}: analytic {} vs fd {fd}",
            g[i]
        );
    }
}
