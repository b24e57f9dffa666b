//! Spectral factorizations of the symmetric PSD summary matrices and the
//! solves built on them.
//!
//! `G = C + s2 P` and `H_aug = H + s2 Sigma^{-1}` are symmetric, so their
//! singular value decompositions coincide with eigendecompositions
//! (`U = V`). Everything here works with the eigen form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::model::{max_asymmetry, symmetrize};

/// Default relative cutoff for truncated decompositions.
pub const DEFAULT_TRUNCATION: f64 = 1e-10;

/// Cholesky pivots smaller than this fraction of the largest pivot are
/// reported as singular by the direct solve path.
pub const MIN_PIVOT_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Keep components with `s_i > tau * s_1`.
    Relative(f64),
    /// Keep the leading `r` components.
    Rank(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMode {
    /// All numerically non-zero components (`s_i > n * eps * s_1`).
    Full,
    Truncated(Truncation),
    /// Gaussian range finder with oversampling and power iterations.
    Randomized {
        rank: usize,
        oversample: usize,
        power_iters: usize,
        seed: u64,
    },
}

impl SpectralMode {
    pub fn truncated(tau: f64) -> Self {
        SpectralMode::Truncated(Truncation::Relative(tau))
    }

    pub fn randomized(rank: usize, seed: u64) -> Self {
        SpectralMode::Randomized { rank, oversample: 10, power_iters: 2, seed }
    }
}

impl Default for SpectralMode {
    fn default() -> Self {
        SpectralMode::Truncated(Truncation::Relative(DEFAULT_TRUNCATION))
    }
}

/// `A ~ U diag(S) U^T` with orthonormal `U` and positive, descending `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFactors {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    /// Relative cutoff that was applied (`s_i > threshold * s_1`).
    pub threshold: f64,
    dim: usize,
}

impl SpectralFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim, self.rank(), |i, j| self.u[(i, j)] * self.s[j]);
        scaled * self.u.transpose()
    }

    /// `||A - U S U^T||_F / ||A||_F`.
    pub fn reconstruction_error(&self, a: &DMatrix<f64>) -> f64 {
        let norm = a.norm();
        if norm == 0.0 {
            return self.reconstruct().norm();
        }
        (a - self.reconstruct()).norm() / norm
    }
}

fn check_input(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(VcmmError::DimensionMismatch { field: "square matrix", expected: a.nrows(), found: a.ncols() });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(VcmmError::NonFinite("matrix"));
    }
    let asym = max_asymmetry(a);
    if asym > 1e-10 * a.amax().max(1.0) {
        return Err(VcmmError::NotSymmetric(asym));
    }
    Ok(symmetrize(a))
}

/// Eigenpairs sorted by descending eigenvalue.
fn sorted_eigen(a: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let SymmetricEigen { eigenvalues, eigenvectors } = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eigenvalues[i]));
    let vectors = DMatrix::from_fn(eigenvectors.nrows(), order.len(), |r, c| eigenvectors[(r, order[c])]);
    (values, vectors)
}

fn keep_leading(values: &DVector<f64>, vectors: &DMatrix<f64>, keep: usize, threshold: f64) -> SpectralFactors {
    SpectralFactors {
        u: vectors.columns(0, keep).into_owned(),
        s: values.rows(0, keep).into_owned(),
        threshold,
        dim: vectors.nrows(),
    }
}

fn count_above(values: &DVector<f64>, tau: f64) -> usize {
    let top = values.iter().copied().next().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    values.iter().take_while(|&&v| v > tau * top).count()
}

/// Orthonormal basis for the columns of `m` via thin QR.
fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let cols = m.ncols().min(m.nrows());
    let q = m.qr().q();
    q.columns(0, cols).into_owned()
}

/// Complete eigendecomposition of a symmetric matrix, kept so that the
/// factors of `A + c I` can be produced for many shifts `c` without
/// decomposing again.
#[derive(Debug, Clone)]
pub struct SymmetricSpectrum {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl SymmetricSpectrum {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let (values, vectors) = sorted_eigen(check_input(a)?);
        Ok(Self { values, vectors })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Factors of `A + shift I` under an exact (full or truncated) mode.
    pub fn shifted_factors(&self, shift: f64, mode: SpectralMode) -> Result<SpectralFactors> {
        let n = self.dim();
        if n == 0 {
            return Ok(SpectralFactors { u: DMatrix::zeros(0, 0), s: DVector::zeros(0), threshold: 0.0, dim: 0 });
        }
        let values = self.values.add_scalar(shift);
        let floor = n as f64 * f64::EPSILON;
        match mode {
            SpectralMode::Full => Ok(keep_leading(&values, &self.vectors, count_above(&values, floor), floor)),
            SpectralMode::Truncated(Truncation::Relative(tau)) => {
                if !(tau >= 0.0) {
                    return Err(VcmmError::InvalidSpec(format!("truncation threshold must be nonnegative, got {tau}")));
                }
                Ok(keep_leading(&values, &self.vectors, count_above(&values, tau), tau))
            }
            SpectralMode::Truncated(Truncation::Rank(r)) => {
                let keep = count_above(&values, floor).min(r);
                let threshold = if keep > 0 { values[keep - 1] / values[0] } else { 0.0 };
                Ok(keep_leading(&values, &self.vectors, keep, threshold))
            }
            SpectralMode::Randomized { .. } => {
                Err(VcmmError::InvalidSpec("randomized factors cannot be shifted; decompose the matrix itself".into()))
            }
        }
    }
}

/// Symmetric spectral decomposition of a PSD matrix under the requested mode.
pub fn spectral_decompose(a: &DMatrix<f64>, mode: SpectralMode) -> Result<SpectralFactors> {
    match mode {
        SpectralMode::Randomized { rank, oversample, power_iters, seed } => {
            let a = check_input(a)?;
            let n = a.nrows();
            if n == 0 {
                return Ok(SpectralFactors { u: DMatrix::zeros(0, 0), s: DVector::zeros(0), threshold: 0.0, dim: 0 });
            }
            let width = (rank + oversample).min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let omega = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
            let mut basis = orthonormalize(&a * omega);
            for _ in 0..power_iters {
                basis = orthonormalize(&a * &basis);
                basis = orthonormalize(&a * &basis);
            }
            let small = symmetrize(&(basis.transpose() * &a * &basis));
            let (values, vectors) = sorted_eigen(small);
            let keep = count_above(&values, n as f64 * f64::EPSILON).min(rank);
            let u = &basis * vectors.columns(0, keep);
            let threshold = if keep > 0 { values[keep - 1] / values[0] } else { 0.0 };
            Ok(SpectralFactors { u, s: values.rows(0, keep).into_owned(), threshold, dim: n })
        }
        exact => SymmetricSpectrum::new(a)?.shifted_factors(0.0, exact),
    }
}

/// `U S^{-1} U^T rhs`: the inverse applied to `rhs` when nothing was
/// truncated, the spectral pseudo-inverse solution otherwise.
pub fn stabilized_solve(factors: &SpectralFactors, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if rhs.len() != factors.dim {
        return Err(VcmmError::DimensionMismatch { field: "rhs", expected: factors.dim, found: rhs.len() });
    }
    let mut coord = factors.u.tr_mul(rhs);
    coord.component_div_assign(&factors.s);
    Ok(&factors.u * coord)
}

/// Smallest eigenvalue of a symmetric matrix, for error reports.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrize(a).symmetric_eigenvalues().min()
}

/// Unpivoted Cholesky factor used by the direct solve path. Fails when the
/// matrix is not positive definite or a pivot collapses below
/// [`MIN_PIVOT_RATIO`] of the largest one.
pub fn cholesky(a: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    let singular = || VcmmError::Singular { what, min_eigenvalue: min_eigenvalue(a) };
    let chol = Cholesky::new(a.clone()).ok_or_else(singular)?;
    let pivots = chol.l_dirty().diagonal().map(|v| v * v);
    if !pivots.is_empty() && pivots.min() <= MIN_PIVOT_RATIO * pivots.max() {
        return Err(singular());
    }
    Ok(chol)
}

/// Solves `a x = rhs` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, rhs: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    Ok(cholesky(a, what)?.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
        m.qr().q()
    }

    fn with_spectrum(rng: &mut ChaCha8Rng, spectrum: &[f64]) -> DMatrix<f64> {
        let n = spectrum.len();
        let q = random_orthogonal(rng, n);
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum));
        symmetrize(&(&q * lam * q.transpose()))
    }

    #[test]
    fn identity_spectrum() {
        let f = spectral_decompose(&DMatrix::identity(5, 5), SpectralMode::Full).unwrap();
        assert_eq!(f.rank(), 5);
        assert!(f.s.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!((f.u.transpose() * &f.u - DMatrix::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn threshold_truncation() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0, 1e-14]));
        let f = spectral_decompose(&a, SpectralMode::truncated(1e-10)).unwrap();
        assert_eq!(f.rank(), 2);
        assert_relative_eq!(f.s[0], 4.0);
        assert_relative_eq!(f.s[1], 1.0);
    }

    #[test]
    fn recovers_known_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spectrum: Vec<f64> = (0..50).map(|i| 10.0 * 0.8f64.powi(i)).collect();
        let a = with_spectrum(&mut rng, &spectrum);
        let f = spectral_decompose(&a, SpectralMode::Full).unwrap();
        assert_eq!(f.rank(), 50);
        for (got, want) in f.s.iter().zip(&spectrum) {
            assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
        }
        assert!(f.reconstruction_error(&a) <= 1e-10);
        assert!((f.u.transpose() * &f.u - DMatrix::identity(50, 50)).amax() <= 1e-10);
    }

    #[test]
    fn fixed_rank_truncation() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 5.0, 1.0, 2.0]));
        let f = spectral_decompose(&a, SpectralMode::Truncated(Truncation::Rank(2))).unwrap();
        assert_eq!(f.s.as_slice(), &[5.0, 3.0]);
    }

    #[test]
    fn rejects_asymmetric_and_nonfinite() {
        let mut a = DMatrix::identity(3, 3);
        a[(0, 1)] = 0.5;
        assert!(matches!(spectral_decompose(&a, SpectralMode::Full), Err(VcmmError::NotSymmetric(_))));
        a[(0, 1)] = f64::NAN;
        assert!(matches!(spectral_decompose(&a, SpectralMode::Full), Err(VcmmError::NonFinite(_))));
    }

    #[test]
    fn randomized_is_near_optimal_and_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spectrum: Vec<f64> = (0..80).map(|i| 0.7f64.powi(i)).collect();
        let a = with_spectrum(&mut rng, &spectrum);
        let r = 10;
        let best = spectrum[r..].iter().map(|v| v * v).sum::<f64>().sqrt() / a.norm();
        let f1 = spectral_decompose(&a, SpectralMode::randomized(r, 42)).unwrap();
        let f2 = spectral_decompose(&a, SpectralMode::randomized(r, 42)).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.rank(), r);
        assert!(f1.reconstruction_error(&a) <= 10.0 * best);
    }

    #[test]
    fn solve_identity_and_dense() {
        let f = spectral_decompose(&DMatrix::identity(4, 4), SpectralMode::Full).unwrap();
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert!((stabilized_solve(&f, &rhs).unwrap() - &rhs).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() + DMatrix::identity(12, 12);
        let rhs = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let f = spectral_decompose(&a, SpectralMode::Full).unwrap();
        let x = stabilized_solve(&f, &rhs).unwrap();
        let direct = a.clone().lu().solve(&rhs).unwrap();
        assert!((&x - &direct).norm() <= 1e-10 * direct.norm());
        assert!(stabilized_solve(&f, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn rank_deficient_solve_in_column_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = DMatrix::from_fn(10, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose();
        let rhs = &a * DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let f = spectral_decompose(&a, SpectralMode::default()).unwrap();
        assert_eq!(f.rank(), 4);
        let x = stabilized_solve(&f, &rhs).unwrap();
        assert!((&a * x - &rhs).norm() <= 1e-8);
    }

    #[test]
    fn ill_conditioned_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spectrum: Vec<f64> = (0..30).map(|i| 10f64.powf(-12.0 * i as f64 / 29.0)).collect();
        let a = with_spectrum(&mut rng, &spectrum);
        let rhs = &a * DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let f = spectral_decompose(&a, SpectralMode::truncated(1e-14)).unwrap();
        let x = stabilized_solve(&f, &rhs).unwrap();
        assert!((&a * x - &rhs).norm() / rhs.norm() <= 1e-6);
    }

    #[test]
    fn truncated_equals_full_without_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spectrum: Vec<f64> = (0..15).map(|i| 1.0 + i as f64).collect();
        let a = with_spectrum(&mut rng, &spectrum);
        let rhs = DVector::from_fn(15, |_, _| rng.random_range(-1.0..1.0));
        let full = stabilized_solve(&spectral_decompose(&a, SpectralMode::Full).unwrap(), &rhs).unwrap();
        let trunc = stabilized_solve(&spectral_decompose(&a, SpectralMode::truncated(1e-3)).unwrap(), &rhs).unwrap();
        assert_eq!(full, trunc);
    }

    #[test]
    fn cholesky_flags_near_singular() {
        let mut a = DMatrix::identity(3, 3);
        a[(2, 2)] = 1e-14;
        assert!(matches!(cholesky(&a, "test"), Err(VcmmError::Singular { .. })));
        assert!(cholesky(&DMatrix::identity(3, 3), "test").is_ok());
    }
}
