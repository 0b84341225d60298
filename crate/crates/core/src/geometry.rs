//! Cholesky factorization and the log-Cholesky manifold.
//!
//! A Cholesky factor `L` splits into its strictly lower part `⌊L⌋` and its
//! positive diagonal `𝔻(L)`. The log-Cholesky metric is Euclidean on `⌊L⌋`
//! and Euclidean on `log 𝔻(L)`, so distances, geodesics and Fréchet means all
//! reduce to flat operations in the coordinates `(⌊L⌋, log 𝔻(L))`, which this
//! module calls [`TangentLower`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_mismatch, Error, Result};
use crate::kronecker::kron;

/// Relative symmetry tolerance for [`SpdMatrix`] validation.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Pivots at or below this fraction of the largest diagonal entry abort the
/// factorization.
pub const PIVOT_FLOOR: f64 = 1e-14;

/// A validated symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry and positive definiteness (via a successful
    /// Cholesky factorization).
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        factor_lower(&m)?;
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Lower-triangular matrix with a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    l: DMatrix<f64>,
}

/// Flat coordinates of a Cholesky factor: the strictly lower part and the
/// (unconstrained) log of the diagonal. Also serves as a tangent vector, since
/// the log-Cholesky manifold is flat in these coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentLower {
    pub strict_lower: DMatrix<f64>,
    pub diag: DVector<f64>,
}

impl CholFactor {
    pub fn new(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::NotSquare { rows: l.nrows(), cols: l.ncols() });
        }
        let d = l.nrows();
        for j in 0..d {
            for i in 0..j {
                if l[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i},{j}) above the diagonal is {}",
                        l[(i, j)]
                    )));
                }
            }
            if !(l[(j, j)] > 0.0) || !l[(j, j)].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "diagonal entry {j} is {} (must be positive)",
                    l[(j, j)]
                )));
            }
        }
        Ok(Self { l })
    }

    /// Builds `⌊strict_lower⌋ + diag(diag)`; entries of `strict_lower` on or
    /// above the diagonal are ignored.
    pub fn from_parts(strict_lower: &DMatrix<f64>, diag: &DVector<f64>) -> Result<Self> {
        let d = diag.len();
        if strict_lower.nrows() != d || strict_lower.ncols() != d {
            return Err(dim_mismatch(format!(
                "strict lower part is {}x{}, diagonal has length {d}",
                strict_lower.nrows(),
                strict_lower.ncols()
            )));
        }
        let mut l = strict_lower_part(strict_lower);
        l.set_diagonal(diag);
        Self::new(l)
    }

    pub fn identity(d: usize) -> Self {
        Self { l: DMatrix::identity(d, d) }
    }

    pub fn from_log_coordinates(t: &TangentLower) -> Result<Self> {
        Self::from_parts(&t.strict_lower, &t.diag.map(f64::exp))
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.l
    }

    pub fn strict_lower(&self) -> DMatrix<f64> {
        strict_lower_part(&self.l)
    }

    pub fn diag(&self) -> DVector<f64> {
        self.l.diagonal()
    }

    pub fn log_diag(&self) -> DVector<f64> {
        self.l.diagonal().map(f64::ln)
    }

    pub fn log_coordinates(&self) -> TangentLower {
        TangentLower { strict_lower: self.strict_lower(), diag: self.log_diag() }
    }

    /// `log det L = Σ log L[i,i]`.
    pub fn log_det(&self) -> f64 {
        self.l.diagonal().iter().map(|x| x.ln()).sum()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Strictly lower triangle of `m` (diagonal and upper part zeroed).
pub fn strict_lower_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.lower_triangle();
    out.fill_diagonal(0.0);
    out
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::NotSquare { rows: m.nrows(), cols: m.ncols() });
    }
    let scale = m.norm();
    let asym = (m - m.transpose()).norm();
    let rel = if scale > 0.0 { asym / scale } else { asym };
    if rel > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(rel));
    }
    Ok(())
}

/// Column-oriented Cholesky–Banachiewicz on the lower triangle of `m`.
fn factor_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let max_diag = m.diagonal().iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
    let floor = PIVOT_FLOOR * max_diag.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut pivot = m[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) {
            return Err(Error::NotPositiveDefinite { minor: j + 1, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor of a validated SPD matrix.
pub fn cholesky(s: &SpdMatrix) -> Result<CholFactor> {
    factor_lower(s.as_matrix()).map(|l| CholFactor { l })
}

/// Cholesky factor of a raw matrix; only the lower triangle is read, after a
/// symmetry check.
pub fn cholesky_dense(m: &DMatrix<f64>) -> Result<CholFactor> {
    check_symmetric(m)?;
    factor_lower(m).map(|l| CholFactor { l })
}

fn same_dim(a: &CholFactor, b: &CholFactor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(dim_mismatch(format!("factor dims {} and {}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Log-Cholesky geodesic distance
/// `[‖⌊L1⌋−⌊L2⌋‖_F² + ‖log 𝔻(L1) − log 𝔻(L2)‖²]^½`.
pub fn log_cholesky_distance(l1: &CholFactor, l2: &CholFactor) -> Result<f64> {
    same_dim(l1, l2)?;
    let d = l1.dim();
    let mut acc = 0.0;
    for j in 0..d {
        let dl = l1.l[(j, j)].ln() - l2.l[(j, j)].ln();
        acc += dl * dl;
        for i in (j + 1)..d {
            let e = l1.l[(i, j)] - l2.l[(i, j)];
            acc += e * e;
        }
    }
    Ok(acc.sqrt())
}

/// Point at time `t ∈ [0,1]` on the geodesic from `l0` to `l1`:
/// `⌊L0⌋ + t(⌊L1⌋−⌊L0⌋) + 𝔻(L1)ᵗ 𝔻(L0)^(1−t)`.
pub fn geodesic_between(l0: &CholFactor, l1: &CholFactor, t: f64) -> Result<CholFactor> {
    same_dim(l0, l1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("geodesic time {t} outside [0, 1]")));
    }
    let d = l0.dim();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        out[(j, j)] = l1.l[(j, j)].powf(t) * l0.l[(j, j)].powf(1.0 - t);
        for i in (j + 1)..d {
            out[(i, j)] = l0.l[(i, j)] + t * (l1.l[(i, j)] - l0.l[(i, j)]);
        }
    }
    CholFactor::new(out)
}

/// Fréchet mean under the log-Cholesky metric:
/// `(1/n) Σ ⌊Lᵢ⌋ + exp{(1/n) Σ log 𝔻(Lᵢ)}`.
pub fn frechet_mean_log_cholesky(ls: &[CholFactor]) -> Result<CholFactor> {
    let first = ls.first().ok_or(Error::Empty("no Cholesky factors to average"))?;
    let d = first.dim();
    let mut lower = DMatrix::<f64>::zeros(d, d);
    let mut logd = DVector::<f64>::zeros(d);
    for l in ls {
        same_dim(first, l)?;
        lower += l.strict_lower();
        logd += l.log_diag();
    }
    let n = ls.len() as f64;
    CholFactor::from_log_coordinates(&TangentLower { strict_lower: lower / n, diag: logd / n })
}

/// Sum of squared log-Cholesky distances from `x` to every factor in `ls`.
pub fn frechet_objective(x: &CholFactor, ls: &[CholFactor]) -> Result<f64> {
    ls.iter().map(|l| log_cholesky_distance(x, l).map(|v| v * v)).sum()
}

/// Symmetric matrix logarithm through the eigendecomposition.
pub fn sym_logm(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sym_apply(s, |x| if x > 0.0 { Ok(x.ln()) } else { Err(Error::MatrixLog(x)) })
}

/// Symmetric matrix exponential through the eigendecomposition.
pub fn sym_expm(s: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(s, |x| Ok(x.exp())).expect("exp is total")
}

fn sym_apply(s: &DMatrix<f64>, f: impl Fn(f64) -> Result<f64>) -> Result<DMatrix<f64>> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.iter().map(|&x| f(x)).collect::<Result<Vec<_>>>()?;
    let v = &eig.eigenvectors;
    let scaled = v * DMatrix::from_diagonal(&DVector::from_vec(vals));
    let out = scaled * v.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Log-Euclidean Fréchet mean `exp((1/n) Σ log Tᵢ)`.
pub fn frechet_mean_log_euclidean(ss: &[SpdMatrix]) -> Result<SpdMatrix> {
    let first = ss.first().ok_or(Error::Empty("no SPD matrices to average"))?;
    let d = first.dim();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for s in ss {
        if s.dim() != d {
            return Err(dim_mismatch(format!("SPD dims {} and {}", d, s.dim())));
        }
        acc += sym_logm(s.as_matrix())?;
    }
    SpdMatrix::new(sym_expm(&(acc / ss.len() as f64)))
}

fn mode_dims(set: &[CholFactor]) -> Vec<usize> {
    set.iter().map(CholFactor::dim).collect()
}

fn check_factor_sets(factor_sets: &[Vec<CholFactor>]) -> Result<Vec<usize>> {
    let first = factor_sets.first().ok_or(Error::Empty("no factor sets"))?;
    if first.is_empty() {
        return Err(Error::Empty("factor set with no modes"));
    }
    let dims = mode_dims(first);
    for (i, set) in factor_sets.iter().enumerate() {
        if mode_dims(set) != dims {
            return Err(dim_mismatch(format!(
                "factor set {i} has mode dims {:?}, expected {:?}",
                mode_dims(set),
                dims
            )));
        }
    }
    Ok(dims)
}

/// `log det L†` for `L† = Σᵢ ⌊⊗ⱼ Lᵢ⁽ʲ⁾⌋ + exp{Σᵢ log 𝔻(⊗ⱼ Lᵢ⁽ʲ⁾)}`, computed
/// from the mode factors alone as `Σᵢ Σⱼ d₋ⱼ log det Lᵢ⁽ʲ⁾` where `d₋ⱼ` is the
/// product of all mode dims except `j`.
pub fn log_det_dagger_general(factor_sets: &[Vec<CholFactor>]) -> Result<f64> {
    let dims = check_factor_sets(factor_sets)?;
    let total: usize = dims.iter().product();
    Ok(factor_sets
        .iter()
        .flat_map(|set| set.iter())
        .map(|l| (total / l.dim()) as f64 * l.log_det())
        .sum())
}

/// Dense `L†` for a collection of Kronecker-structured Cholesky factors
/// (unweighted sums, as in the model).
pub fn assemble_dagger_general(factor_sets: &[Vec<CholFactor>]) -> Result<CholFactor> {
    let dims = check_factor_sets(factor_sets)?;
    let total: usize = dims.iter().product();
    let mut lower = DMatrix::<f64>::zeros(total, total);
    let mut logd = DVector::<f64>::zeros(total);
    for set in factor_sets {
        let full = set
            .iter()
            .skip(1)
            .fold(set[0].matrix().clone(), |acc, l| kron(&acc, l.matrix()));
        lower += strict_lower_part(&full);
        logd += full.diagonal().map(f64::ln);
    }
    CholFactor::from_log_coordinates(&TangentLower { strict_lower: lower, diag: logd })
}
