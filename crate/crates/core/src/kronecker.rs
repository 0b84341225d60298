//! Kronecker algebra.
//!
//! Index conventions used throughout the crate (all 0-based):
//!
//! * `kron(A, B)[d2*r + v, d2*s + w] = A[r, s] * B[v, w]`.
//! * A vector `y` of length `d1*d2` is read as a `d1 x d2` array with
//!   `Y[r, v] = y[d2*r + v]`. [`fold_mode1`] returns the `d2 x d1` matrix
//!   `X = Yᵀ` (stored column-major, so its storage is `y` itself), and then
//!   `(A ⊗ B) y = unfold(B X Aᵀ)`. The transpose sits on the mode-1 factor.
//! * The Van Loan rearrangement maps block `(r, s)` of `S` to row `r + d1*s`
//!   of `R` (column-major `vec` of `A`), and `(v, w)` to column `v + d2*w`, so
//!   `R(A ⊗ B) = vec(A) vec(B)ᵀ`.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{dim_mismatch, Error, Result};
use crate::model::SckpdParams;

/// One Kronecker term `A ⊗ B`.
#[derive(Debug, Clone, PartialEq)]
pub struct KronPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl KronPair {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || !b.is_square() {
            return Err(dim_mismatch(format!(
                "Kronecker factors must be square, got {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.nrows())
    }

    pub fn dense(&self) -> DMatrix<f64> {
        kron(&self.a, &self.b)
    }
}

/// Pitsianis–Van Loan decomposition of a `d1*d2` square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PvlDecomp {
    pub terms: Vec<KronPair>,
    pub source_dims: (usize, usize),
    /// Frobenius norm of the part of the source not captured by `terms`.
    pub residual_fro: f64,
}

impl PvlDecomp {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let (d1, d2) = self.source_dims;
        let n = d1 * d2;
        self.terms.iter().fold(DMatrix::zeros(n, n), |acc, t| acc + t.dense())
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

fn check_square_dims(s: &DMatrix<f64>, d1: usize, d2: usize) -> Result<()> {
    let n = d1 * d2;
    if d1 == 0 || d2 == 0 || s.nrows() != n || s.ncols() != n {
        return Err(dim_mismatch(format!(
            "expected a {n}x{n} matrix for d1={d1}, d2={d2}, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

/// `R[r + d1*s, v + d2*w] = S[d2*r + v, d2*s + w]`.
pub fn vanloan_rearrange(s: &DMatrix<f64>, d1: usize, d2: usize) -> Result<DMatrix<f64>> {
    check_square_dims(s, d1, d2)?;
    Ok(DMatrix::from_fn(d1 * d1, d2 * d2, |row, col| {
        let (r, ss) = (row % d1, row / d1);
        let (v, w) = (col % d2, col / d2);
        s[(d2 * r + v, d2 * ss + w)]
    }))
}

/// Inverse of [`vanloan_rearrange`].
pub fn vanloan_inverse(r: &DMatrix<f64>, d1: usize, d2: usize) -> Result<DMatrix<f64>> {
    if r.nrows() != d1 * d1 || r.ncols() != d2 * d2 {
        return Err(dim_mismatch(format!(
            "expected a {}x{} rearrangement, got {}x{}",
            d1 * d1,
            d2 * d2,
            r.nrows(),
            r.ncols()
        )));
    }
    let n = d1 * d2;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (r_, v) = (i / d2, i % d2);
        let (s, w) = (j / d2, j % d2);
        r[(r_ + d1 * s, v + d2 * w)]
    }))
}

/// Orthonormal basis of `vec` space for `d x d` matrices: the first
/// `d(d+1)/2` columns span the symmetric matrices, the rest the antisymmetric.
fn sym_antisym_basis(d: usize) -> (DMatrix<f64>, usize) {
    let mut q = DMatrix::zeros(d * d, d * d);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut col = 0;
    for j in 0..d {
        for i in j..d {
            if i == j {
                q[(i + d * i, col)] = 1.0;
            } else {
                q[(i + d * j, col)] = h;
                q[(j + d * i, col)] = h;
            }
            col += 1;
        }
    }
    let n_sym = col;
    for j in 0..d {
        for i in (j + 1)..d {
            q[(i + d * j, col)] = h;
            q[(j + d * i, col)] = -h;
            col += 1;
        }
    }
    (q, n_sym)
}

struct Triplet {
    sigma: f64,
    u: DVector<f64>,
    v: DVector<f64>,
}

fn svd_triplets(m: &DMatrix<f64>) -> Result<Vec<Triplet>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 0).ok_or(Error::SvdFailed)?;
    let u = svd.u.ok_or(Error::SvdFailed)?;
    let vt = svd.v_t.ok_or(Error::SvdFailed)?;
    Ok(svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(k, &sigma)| Triplet { sigma, u: u.column(k).into_owned(), v: vt.row(k).transpose() })
        .collect())
}

fn fix_sign(t: &mut Triplet) {
    let scale = t.u.amax();
    if let Some(first) = t.u.iter().copied().find(|x| x.abs() > 1e-12 * scale) {
        if first < 0.0 {
            t.u.neg_mut();
            t.v.neg_mut();
        }
    }
}

fn is_symmetric(s: &DMatrix<f64>) -> bool {
    let scale = s.norm();
    scale == 0.0 || (s - s.transpose()).norm() <= 1e-12 * scale
}

/// Leading `n_terms` Kronecker terms of `s` from the SVD of its Van Loan
/// rearrangement.
///
/// For symmetric `s` the rearrangement commutes with the transpose swap on
/// both sides, so it is block diagonal in the symmetric/antisymmetric bases.
/// Each block is decomposed separately, which makes every returned pair either
/// jointly symmetric or jointly antisymmetric even for tied singular values.
pub fn pvl_decompose(s: &DMatrix<f64>, d1: usize, d2: usize, n_terms: usize) -> Result<PvlDecomp> {
    let r = vanloan_rearrange(s, d1, d2)?;
    let max_terms = d1.min(d2).pow(2);
    if n_terms > max_terms {
        return Err(Error::InvalidArgument(format!(
            "n_terms = {n_terms} exceeds min(d1, d2)^2 = {max_terms}"
        )));
    }

    let mut triplets = if is_symmetric(s) {
        let (q1, n1) = sym_antisym_basis(d1);
        let (q2, n2) = sym_antisym_basis(d2);
        let rot = q1.transpose() * &r * &q2;
        let mut out = Vec::new();
        let blocks = [
            (0, n1, 0, n2),
            (n1, d1 * d1 - n1, n2, d2 * d2 - n2),
        ];
        for (r0, nr, c0, nc) in blocks {
            let block = rot.view((r0, c0), (nr, nc)).into_owned();
            for t in svd_triplets(&block)? {
                out.push(Triplet {
                    sigma: t.sigma,
                    u: q1.columns(r0, nr) * t.u,
                    v: q2.columns(c0, nc) * t.v,
                });
            }
        }
        out
    } else {
        svd_triplets(&r)?
    };
    triplets.sort_by(|a, b| b.sigma.total_cmp(&a.sigma));
    triplets.truncate(max_terms);

    let tail: f64 = triplets.iter().skip(n_terms).map(|t| t.sigma * t.sigma).sum();
    // Singular values beyond min(d1², d2²) are structurally zero.
    let terms = triplets
        .into_iter()
        .take(n_terms)
        .map(|mut t| {
            fix_sign(&mut t);
            let root = t.sigma.sqrt();
            KronPair {
                a: DMatrix::from_column_slice(d1, d1, (t.u * root).as_slice()),
                b: DMatrix::from_column_slice(d2, d2, (t.v * root).as_slice()),
            }
        })
        .collect();
    Ok(PvlDecomp { terms, source_dims: (d1, d2), residual_fro: tail.sqrt() })
}

/// `d2 x d1` mode-1 folding of `v` (see the module docs for the layout).
pub fn fold_mode1(v: &DVector<f64>, d1: usize, d2: usize) -> Result<DMatrix<f64>> {
    if v.len() != d1 * d2 {
        return Err(dim_mismatch(format!("vector length {} != d1*d2 = {}", v.len(), d1 * d2)));
    }
    Ok(DMatrix::from_column_slice(d2, d1, v.as_slice()))
}

pub fn unfold_mode1(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Dense column-major D-way array (first index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(dim_mismatch(format!(
                "shape {shape:?} holds {n} entries, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self { shape: vec![m.nrows(), m.ncols()], data: m.as_slice().to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        let mut off = 0;
        let mut stride = 1;
        for (&i, &n) in idx.iter().zip(&self.shape) {
            debug_assert!(i < n);
            off += i * stride;
            stride *= n;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], x: f64) {
        let off = self.offset(idx);
        self.data[off] = x;
    }

    /// Column-major vectorization, `vec(T)`.
    pub fn vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    /// The 2-way tensor as a matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.shape.len() != 2 {
            return Err(dim_mismatch(format!("tensor of order {} is not a matrix", self.shape.len())));
        }
        Ok(DMatrix::from_column_slice(self.shape[0], self.shape[1], &self.data))
    }
}

/// Mode-`mode` product `(T ×ᵢ B)[.., q, ..] = Σₖ T[.., k, ..] B[k, q]`.
pub fn tucker_mode_product(t: &Tensor, b: &DMatrix<f64>, mode: usize) -> Result<Tensor> {
    if mode >= t.shape.len() {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} out of range for a tensor of order {}",
            t.shape.len()
        )));
    }
    let n = t.shape[mode];
    if b.nrows() != n {
        return Err(dim_mismatch(format!(
            "mode-{mode} extent is {n} but the matrix has {} rows",
            b.nrows()
        )));
    }
    let q = b.ncols();
    let inner: usize = t.shape[..mode].iter().product();
    let outer: usize = t.shape[mode + 1..].iter().product();
    let mut shape = t.shape.clone();
    shape[mode] = q;
    let mut out = vec![0.0; inner * q * outer];
    for o in 0..outer {
        for k in 0..n {
            let src = &t.data[(o * n + k) * inner..(o * n + k + 1) * inner];
            for j in 0..q {
                let bkj = b[(k, j)];
                if bkj == 0.0 {
                    continue;
                }
                let dst = &mut out[(o * q + j) * inner..(o * q + j + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * bkj;
                }
            }
        }
    }
    Ok(Tensor { shape, data: out })
}

/// `T ∘ {B₁, …, B_D}`: the mode product applied over every mode in order.
pub fn tucker_full(t: &Tensor, bs: &[DMatrix<f64>]) -> Result<Tensor> {
    if bs.len() != t.shape.len() {
        return Err(dim_mismatch(format!("{} matrices for a tensor of order {}", bs.len(), t.shape.len())));
    }
    bs.iter().enumerate().try_fold(t.clone(), |acc, (i, b)| tucker_mode_product(&acc, b, i))
}

/// `L† x` through mode-1 foldings, never forming `L†`.
///
/// Each component `⌊L₁⊗L₂⌋` with shared diagonals equals
/// `(D₁+⌊L₁⌋)⊗(D₂+⌊L₂⌋) − D₁⊗D₂`, so
/// `fold(L† x) = Σᵢ (D₂+⌊L₂ᵢ⌋) X (D₁+⌊L₁ᵢ⌋)ᵀ − (K−1) D₂ X D₁`.
pub fn sckpd_matvec(p: &SckpdParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    let (d1, d2) = (p.d1(), p.d2());
    let xm = fold_mode1(x, d1, d2)?;
    let dm1 = DMatrix::from_diagonal(&p.d1_diag);
    let dm2 = DMatrix::from_diagonal(&p.d2_diag);
    let base = &dm2 * &xm * &dm1;
    let mut y = &base * (1.0 - p.k() as f64);
    for (l1, l2) in p.lowers1.iter().zip(&p.lowers2) {
        let f1 = l1 + &dm1;
        let f2 = l2 + &dm2;
        y += f2 * &xm * f1.transpose();
    }
    Ok(unfold_mode1(&y))
}

/// Kronecker factor sets whose general `L†` (see
/// [`crate::geometry::assemble_dagger_general`]) approximates an arbitrary
/// Cholesky factor `l` of size `d1*d2`.
///
/// With `Y[r,s,v,w] = l[d2 r + v, d2 s + w]`:
///
/// * the `r > s, v > w` entries are reproduced exactly by the full Van Loan
///   decomposition of that pattern, whose factors are strictly lower, each
///   entering as `(I + A_q, I + B_q)`;
/// * the `r > s, v = w` and `r = s, v > w` entries are reproduced exactly by
///   single-sided components `(I + T_j, diag(1 + e_j))` and
///   `(diag(1 + e_j), I + U_j)`;
/// * the diagonal is the rank-1 fit of `𝔻(l)` arranged as a `d1 x d2` matrix,
///   carried by one diagonal component that also cancels the diagonals of the
///   single-sided ones.
///
/// The `r > s, v < w` entries cannot be produced by any such sum and are left
/// out, so the error is exactly `sqrt(‖those entries‖² + diagonal residual²)`.
pub fn fit_dagger_general(l: &crate::geometry::CholFactor, d1: usize, d2: usize) -> Result<Vec<Vec<crate::geometry::CholFactor>>> {
    use crate::geometry::{strict_lower_part, CholFactor};
    if l.dim() != d1 * d2 || d1 == 0 || d2 == 0 {
        return Err(dim_mismatch(format!("factor of dim {} for d1*d2 = {}", l.dim(), d1 * d2)));
    }
    let lm = l.matrix();
    let at = |r: usize, s: usize, v: usize, w: usize| lm[(d2 * r + v, d2 * s + w)];

    let diag = DMatrix::from_fn(d1, d2, |r, v| at(r, r, v, v));
    let t = svd_triplets(&diag)?.into_iter().max_by(|a, b| a.sigma.total_cmp(&b.sigma)).ok_or(Error::SvdFailed)?;
    let (mut u, mut v) = (t.u, t.v);
    if u.sum() < 0.0 {
        u.neg_mut();
        v.neg_mut();
    }
    // a positive matrix has a positive leading singular pair (Perron)
    let dd1 = u.map(|x| (x * t.sigma.sqrt()).max(f64::MIN_POSITIVE));
    let dd2 = v.map(|x| (x * t.sigma.sqrt()).max(f64::MIN_POSITIVE));

    let mut pattern = DMatrix::zeros(d1 * d2, d1 * d2);
    for r in 0..d1 {
        for s in 0..r {
            for vv in 0..d2 {
                for w in 0..vv {
                    pattern[(d2 * r + vv, d2 * s + w)] = at(r, s, vv, w);
                }
            }
        }
    }
    let rr = d1.min(d2);
    let pvl = pvl_decompose(&pattern, d1, d2, rr * rr)?;
    let mut sets = Vec::new();
    let (i1, i2) = (DMatrix::<f64>::identity(d1, d1), DMatrix::<f64>::identity(d2, d2));
    let mut sum_a = DMatrix::zeros(d1, d1);
    let mut sum_b = DMatrix::zeros(d2, d2);
    for term in &pvl.terms {
        let (a, b) = (strict_lower_part(&term.a), strict_lower_part(&term.b));
        sum_a += &a;
        sum_b += &b;
        sets.push(vec![CholFactor::new(&i1 + a)?, CholFactor::new(&i2 + b)?]);
    }

    // (I + 11ᵀ)⁻¹ = I − 11ᵀ/(1 + n) solves Σ_j x_j (1 + e_j) = target
    let solve = |target: &[f64]| -> Vec<f64> {
        let n = target.len() as f64;
        let tot: f64 = target.iter().sum();
        target.iter().map(|x| x - tot / (1.0 + n)).collect()
    };
    let mut ts = vec![DMatrix::zeros(d1, d1); d2];
    for r in 0..d1 {
        for s in 0..r {
            let target: Vec<f64> = (0..d2).map(|vv| at(r, s, vv, vv) - sum_a[(r, s)]).collect();
            for (j, x) in solve(&target).into_iter().enumerate() {
                ts[j][(r, s)] = x;
            }
        }
    }
    let mut us = vec![DMatrix::zeros(d2, d2); d1];
    for vv in 0..d2 {
        for w in 0..vv {
            let target: Vec<f64> = (0..d1).map(|r| at(r, r, vv, w) - sum_b[(vv, w)]).collect();
            for (j, x) in solve(&target).into_iter().enumerate() {
                us[j][(vv, w)] = x;
            }
        }
    }
    let bump = |n: usize, j: usize| DVector::from_fn(n, |i, _| if i == j { 2.0 } else { 1.0 });
    let mut prod1 = DVector::from_element(d1, 1.0);
    let mut prod2 = DVector::from_element(d2, 1.0);
    for (j, tj) in ts.into_iter().enumerate() {
        let c = bump(d2, j);
        prod2.component_mul_assign(&c);
        sets.push(vec![CholFactor::new(&i1 + tj)?, CholFactor::new(DMatrix::from_diagonal(&c))?]);
    }
    for (j, uj) in us.into_iter().enumerate() {
        let c = bump(d1, j);
        prod1.component_mul_assign(&c);
        sets.push(vec![CholFactor::new(DMatrix::from_diagonal(&c))?, CholFactor::new(&i2 + uj)?]);
    }
    sets.push(vec![
        CholFactor::new(DMatrix::from_diagonal(&dd1.component_div(&prod1)))?,
        CholFactor::new(DMatrix::from_diagonal(&dd2.component_div(&prod2)))?,
    ]);
    Ok(sets)
}
