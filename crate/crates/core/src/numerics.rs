//! Dense linear-algebra substrate.
//!
//! Rank, kernel and image computations go through the singular value
//! decomposition with a threshold relative to the largest singular value.
//! Eigenvalues come from a Schur reduction. Stabilizing gains are designed
//! from an identity-weighted discrete algebraic Riccati equation solved by a
//! structured doubling iteration.

use nalgebra::{ComplexField, DMatrix, DVector, Dyn, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Real dense matrix.
pub type Mat = DMatrix<f64>;
/// Complex dense matrix.
pub type CMat = DMatrix<Complex64>;
/// Real dense column vector.
pub type Vector = DVector<f64>;

/// Relative rank threshold applied to the largest singular value.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-9;

/// Target relative residual of the Riccati solution.
pub const RICCATI_RESIDUAL: f64 = 1e-10;

const RICCATI_MAX_DOUBLING: usize = 200;
const RICCATI_MAX_POLISH: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rank tolerance must lie in (0, 1), got {0}")]
    BadTolerance(f64),
    #[error("pair is not stabilizable: mode {0} cannot be moved")]
    NotStabilizable(Complex64),
    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    RiccatiNotConverged { iterations: usize, residual: f64 },
    #[error("Riccati gain does not stabilize the pair (closed-loop spectral radius {0})")]
    GainNotStabilizing(f64),
    #[error("Schur iteration failed to converge")]
    EigenFailure,
    #[error("singular matrix encountered")]
    Singular,
}

/// Relative singular-value threshold used by every rank decision.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RankTolerance(f64);

impl RankTolerance {
    pub fn new(relative_epsilon: f64) -> Result<Self, NumericsError> {
        if relative_epsilon.is_finite() && relative_epsilon > 0.0 && relative_epsilon < 1.0 {
            Ok(Self(relative_epsilon))
        } else {
            Err(NumericsError::BadTolerance(relative_epsilon))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for RankTolerance {
    fn default() -> Self {
        Self(DEFAULT_RANK_TOLERANCE)
    }
}

impl TryFrom<f64> for RankTolerance {
    type Error = NumericsError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<RankTolerance> for f64 {
    fn from(t: RankTolerance) -> f64 {
        t.0
    }
}

pub fn ensure_finite(m: &Mat) -> Result<(), NumericsError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite)
    }
}

fn ensure_square<T>(m: &DMatrix<T>) -> Result<(), NumericsError> {
    if m.is_square() {
        Ok(())
    } else {
        Err(NumericsError::NotSquare { rows: m.nrows(), cols: m.ncols() })
    }
}

fn singular_values<T>(m: &DMatrix<T>) -> Vec<f64>
where
    T: ComplexField<RealField = f64>,
{
    if m.is_empty() {
        return Vec::new();
    }
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

fn rank_from_singular_values(sv: &[f64], tol: RankTolerance) -> usize {
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let thr = tol.get() * smax;
    sv.iter().filter(|&&s| s > thr).count()
}

/// Number of singular values above `tol · σ_max`.
pub fn rank_of(m: &Mat, tol: RankTolerance) -> usize {
    rank_from_singular_values(&singular_values(m), tol)
}

pub fn rank_of_complex(m: &CMat, tol: RankTolerance) -> usize {
    rank_from_singular_values(&singular_values(m), tol)
}

/// Largest singular value (0 for empty matrices).
pub fn norm2(m: &Mat) -> f64 {
    singular_values(m).into_iter().fold(0.0, f64::max)
}

/// Smallest singular value of a complex matrix.
pub fn min_singular_value_complex(m: &CMat) -> f64 {
    singular_values(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Orthonormal basis (as columns) of the null space of `m`.
pub fn kernel_basis(m: &Mat, tol: RankTolerance) -> Mat {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Mat::zeros(0, 0);
    }
    if rows == 0 {
        return Mat::identity(cols, cols);
    }
    // Zero rows leave the kernel unchanged but make the thin SVD return all of V.
    let padded = if rows < cols {
        let mut p = Mat::zeros(cols, cols);
        p.view_mut((0, 0), (rows, cols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Mat::identity(cols, cols);
    }
    let thr = tol.get() * smax;
    let null_rows: Vec<usize> = (0..cols).filter(|&i| svd.singular_values[i] <= thr).collect();
    let mut basis = Mat::zeros(cols, null_rows.len());
    for (c, &r) in null_rows.iter().enumerate() {
        basis.set_column(c, &v_t.row(r).transpose());
    }
    basis
}

/// Orthonormal basis (as columns) of the column space of `m`.
pub fn image_basis(m: &Mat, tol: RankTolerance) -> Mat {
    image_basis_with_floor(m, tol, 0.0)
}

/// Like [`image_basis`], with the threshold `tol · max(σ_max, floor)`, so that
/// a matrix at the rounding level of `floor` counts as zero.
pub fn image_basis_with_floor(m: &Mat, tol: RankTolerance, floor: f64) -> Mat {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Mat::zeros(rows, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().copied().fold(floor, f64::max);
    if smax == 0.0 {
        return Mat::zeros(rows, 0);
    }
    let thr = tol.get() * smax;
    let keep: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > thr).collect();
    let mut basis = Mat::zeros(rows, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.set_column(c, &u.column(i));
    }
    basis
}

/// Rank with the threshold `tol · max(σ_max, floor)`.
pub fn rank_with_floor(m: &Mat, tol: RankTolerance, floor: f64) -> usize {
    let sv = singular_values(m);
    let smax = sv.iter().copied().fold(floor, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol.get() * smax).count()
}

/// Drop the singular values at or below `tol · max(σ_max, floor)`.
pub fn truncate_rank(m: &Mat, tol: RankTolerance, floor: f64) -> Mat {
    if m.is_empty() {
        return m.clone();
    }
    let mut svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(floor, f64::max);
    let thr = tol.get() * smax;
    if svd.singular_values.iter().all(|&s| s > thr) {
        return m.clone();
    }
    for s in svd.singular_values.iter_mut() {
        if *s <= thr {
            *s = 0.0;
        }
    }
    svd.recompose().expect("both singular vector sets requested")
}

/// Orthonormal basis of the orthogonal complement of the column space of `m`.
pub fn orthogonal_complement(m: &Mat, tol: RankTolerance) -> Mat {
    if m.ncols() == 0 {
        return Mat::identity(m.nrows(), m.nrows());
    }
    kernel_basis(&m.transpose(), tol)
}

/// Minimum-norm least-squares solution of `a · x = b`.
pub fn lstsq(a: &Mat, b: &Mat, tol: RankTolerance) -> Result<Mat, NumericsError> {
    if a.nrows() != b.nrows() {
        return Err(NumericsError::Dimension(format!(
            "lstsq: {}x{} system with {} right-hand-side rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    if a.is_empty() {
        return Ok(Mat::zeros(a.ncols(), b.ncols()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return Ok(Mat::zeros(a.ncols(), b.ncols()));
    }
    svd.solve(b, tol.get() * smax).map_err(|_| NumericsError::Singular)
}

/// Horizontal concatenation `[a b]`.
pub fn hstack(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.nrows(), b.nrows(), "hstack row mismatch");
    let mut m = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// Vertical concatenation `[a; b]`.
pub fn vstack(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.ncols(), b.ncols(), "vstack column mismatch");
    let mut m = Mat::zeros(a.nrows() + b.nrows(), a.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((a.nrows(), 0), b.shape()).copy_from(b);
    m
}

/// 2×2 block matrix `[[a, b], [c, d]]`.
pub fn block2(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    vstack(&hstack(a, b), &hstack(c, d))
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Kronecker product of a complex and a real matrix.
pub fn kron_complex_real(a: &CMat, b: &Mat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == Complex64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

fn schur_iteration_cap(n: usize) -> usize {
    1000 * n.max(1)
}

/// The QR sweep occasionally stalls at the tightest deflation threshold
/// (exactly repeated eigenvalues); loosen it a little before giving up.
fn schur_with_retry<T>(m: &DMatrix<T>) -> Result<Schur<T, Dyn>, NumericsError>
where
    T: ComplexField<RealField = f64>,
{
    let cap = schur_iteration_cap(m.nrows());
    [1.0, 16.0, 256.0]
        .iter()
        .find_map(|&f| Schur::try_new(m.clone(), f * f64::EPSILON, cap))
        .ok_or(NumericsError::EigenFailure)
}

/// All eigenvalues of a real square matrix, with multiplicity.
pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex64>, NumericsError> {
    ensure_square(m)?;
    ensure_finite(m)?;
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let schur = schur_with_retry(m)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// All eigenvalues of a complex square matrix, with multiplicity.
pub fn eigenvalues_complex(m: &CMat) -> Result<Vec<Complex64>, NumericsError> {
    ensure_square(m)?;
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let schur = schur_with_retry(m)?;
    // Complex Schur forms are upper triangular: the diagonal holds the spectrum.
    let (_, t) = schur.unpack();
    Ok(t.diagonal().iter().copied().collect())
}

pub fn spectral_radius(m: &Mat) -> Result<f64, NumericsError> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

pub fn spectral_radius_complex(m: &CMat) -> Result<f64, NumericsError> {
    Ok(eigenvalues_complex(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Relative distance below which computed eigenvalues are treated as one cluster.
pub const EIGEN_CLUSTER_TOLERANCE: f64 = 1e-4;

/// Group eigenvalues closer than `rel · (1 + |z|)` (transitively) and return
/// each group's centroid with its size. A Jordan block of size `k` scatters
/// its computed eigenvalues by about `ε^{1/k}`, while their mean stays accurate
/// to rounding level.
pub fn eigenvalue_clusters(eigs: &[Complex64], rel: f64) -> Vec<(Complex64, usize)> {
    let n = eigs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = 1.0 + eigs[i].norm().max(eigs[j].norm());
            if (eigs[i] - eigs[j]).norm() <= rel * scale {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj] = ri;
                }
            }
        }
    }
    let mut sums: Vec<(usize, Complex64, usize)> = Vec::new();
    for (i, z) in eigs.iter().enumerate() {
        let r = find(&mut parent, i);
        match sums.iter_mut().find(|(root, _, _)| *root == r) {
            Some(entry) => {
                entry.1 += z;
                entry.2 += 1;
            }
            None => sums.push((r, *z, 1)),
        }
    }
    sums.into_iter().map(|(_, s, c)| (s / c as f64, c)).collect()
}

/// Spectral radius from cluster centroids; robust for defective matrices.
pub fn spectral_radius_clustered(eigs: &[Complex64]) -> f64 {
    eigenvalue_clusters(eigs, EIGEN_CLUSTER_TOLERANCE).iter().map(|(z, _)| z.norm()).fold(0.0, f64::max)
}

/// Relative threshold for the PBH rank tests. Eigenvalues of defective
/// matrices are only accurate to about √ε, so the test has to look past that.
pub const PBH_RANK_TOLERANCE: f64 = 1e-7;

/// Eigenvalues of `a` on or outside the unit circle (`|z| ≥ 1 − 1e-9`),
/// with numerically repeated values merged.
pub fn marginal_eigenvalues(a: &Mat) -> Result<Vec<Complex64>, NumericsError> {
    let mut out: Vec<Complex64> = Vec::new();
    for z in eigenvalues(a)? {
        if z.norm() < 1.0 - 1e-9 {
            continue;
        }
        if !out.iter().any(|w| (w - z).norm() <= 1e-6 * (1.0 + z.norm())) {
            out.push(z);
        }
    }
    Ok(out)
}

/// PBH stabilizability test: `rank [zI − A, B] = n` at every eigenvalue with `|z| ≥ 1`.
/// Returns the first offending eigenvalue, if any.
pub fn pbh_uncontrollable_mode(
    a: &Mat,
    b: &Mat,
    tol: RankTolerance,
) -> Result<Option<Complex64>, NumericsError> {
    ensure_square(a)?;
    if b.nrows() != a.nrows() {
        return Err(NumericsError::Dimension(format!(
            "B has {} rows, A is {}x{}",
            b.nrows(),
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let tol = RankTolerance::new(tol.get().max(PBH_RANK_TOLERANCE))?;
    let ac = to_complex(a);
    let bc = to_complex(b);
    for z in marginal_eigenvalues(a)? {
        let mut pencil = CMat::zeros(n, n + b.ncols());
        let mut zi = -ac.clone();
        for d in 0..n {
            zi[(d, d)] += z;
        }
        pencil.view_mut((0, 0), (n, n)).copy_from(&zi);
        pencil.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if rank_of_complex(&pencil, tol) < n {
            return Ok(Some(z));
        }
    }
    Ok(None)
}

/// Identity-weighted discrete Riccati solution `P` for the pair `(A, B)`.
pub fn solve_dare(a: &Mat, b: &Mat) -> Result<Mat, NumericsError> {
    let n = a.nrows();
    let id = Mat::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * b.transpose();
    let mut hk = id.clone();
    let mut converged = false;
    for _ in 0..RICCATI_MAX_DOUBLING {
        let w = &id + &gk * &hk;
        let lu = w.lu();
        let w_inv_a = lu.solve(&ak).ok_or(NumericsError::Singular)?;
        let w_inv_g = lu.solve(&gk).ok_or(NumericsError::Singular)?;
        let a_next = &ak * &w_inv_a;
        let mut g_next = &gk + &ak * &w_inv_g * ak.transpose();
        let mut h_next = &hk + ak.transpose() * &hk * &w_inv_a;
        g_next = (&g_next + g_next.transpose()) * 0.5;
        h_next = (&h_next + h_next.transpose()) * 0.5;
        ensure_finite(&h_next)?;
        let change = (&h_next - &hk).norm() / h_next.norm().max(1.0);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if change < 1e-15 || ak.norm() < 1e-300 {
            converged = true;
            break;
        }
    }
    let mut p = hk;
    let mut residual = dare_residual(a, b, &p)?;
    // Fixed-point sweeps tidy up whatever the doubling left behind.
    let mut polish = 0;
    while residual > RICCATI_RESIDUAL && polish < RICCATI_MAX_POLISH {
        p = riccati_map(a, b, &p)?;
        residual = dare_residual(a, b, &p)?;
        polish += 1;
    }
    if residual > RICCATI_RESIDUAL {
        return Err(NumericsError::RiccatiNotConverged {
            iterations: if converged { polish } else { RICCATI_MAX_DOUBLING + polish },
            residual,
        });
    }
    Ok(p)
}

fn riccati_gain(a: &Mat, b: &Mat, p: &Mat) -> Result<Mat, NumericsError> {
    let m = b.ncols();
    let s = Mat::identity(m, m) + b.transpose() * p * b;
    s.lu().solve(&(b.transpose() * p * a)).ok_or(NumericsError::Singular)
}

fn riccati_map(a: &Mat, b: &Mat, p: &Mat) -> Result<Mat, NumericsError> {
    let n = a.nrows();
    let k = riccati_gain(a, b, p)?;
    let next = a.transpose() * p * a - a.transpose() * p * b * k + Mat::identity(n, n);
    Ok((&next + next.transpose()) * 0.5)
}

/// Relative residual `‖Ric(P) − P‖ / max(1, ‖P‖)` of the Riccati equation.
pub fn dare_residual(a: &Mat, b: &Mat, p: &Mat) -> Result<f64, NumericsError> {
    let r = riccati_map(a, b, p)? - p;
    Ok(r.norm() / p.norm().max(1.0))
}

/// Gain `K` with `A − B·K` Schur stable, from the identity-weighted Riccati
/// equation: `K = (I + BᵀPB)⁻¹ BᵀPA`.
pub fn design_stabilizing_gain(a: &Mat, b: &Mat) -> Result<Mat, NumericsError> {
    ensure_square(a)?;
    ensure_finite(a)?;
    ensure_finite(b)?;
    if let Some(z) = pbh_uncontrollable_mode(a, b, RankTolerance::default())? {
        return Err(NumericsError::NotStabilizable(z));
    }
    if a.nrows() == 0 {
        return Ok(Mat::zeros(b.ncols(), 0));
    }
    let p = solve_dare(a, b)?;
    let k = riccati_gain(a, b, &p)?;
    let rho = spectral_radius(&(a - b * &k))?;
    if rho >= 1.0 {
        return Err(NumericsError::GainNotStabilizing(rho));
    }
    Ok(k)
}

/// Observer gain `F` with `A − F·C` Schur stable, via the dual pair.
pub fn design_observer_gain(a: &Mat, c: &Mat) -> Result<Mat, NumericsError> {
    Ok(design_stabilizing_gain(&a.transpose(), &c.transpose())?.transpose())
}
