//! Clamped B-spline bases on `[0, 1]`, tensor products of them, and the
//! expanded varying-coefficient design.
//!
//! Knot vectors repeat each boundary knot `degree + 1` times, so a basis of
//! `Q_m` functions needs `Q_m - degree - 1` interior knots. Nineteen cubic
//! functions therefore use fifteen interior knots.
//!
//! Tensor evaluations are flattened with the last margin varying fastest,
//! matching `kron(phi_1, phi_2, ..., phi_M)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};

/// A univariate clamped B-spline basis on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateBasis {
    degree: usize,
    interior_knots: Vec<f64>,
    knots: Vec<f64>,
}

impl UnivariateBasis {
    pub fn new(degree: usize, interior_knots: Vec<f64>) -> Result<Self> {
        for w in interior_knots.windows(2) {
            if !(w[0] < w[1]) {
                return Err(VcmmError::InvalidSpec("interior knots must be strictly increasing".into()));
            }
        }
        if interior_knots.iter().any(|&k| !(k > 0.0 && k < 1.0)) {
            return Err(VcmmError::InvalidSpec("interior knots must lie strictly inside (0, 1)".into()));
        }
        let mut knots = Vec::with_capacity(interior_knots.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(0.0, degree + 1));
        knots.extend_from_slice(&interior_knots);
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, interior_knots, knots })
    }

    /// `n_basis` functions with equally spaced interior knots.
    pub fn uniform(n_basis: usize, degree: usize) -> Result<Self> {
        let n_interior = Self::interior_count(n_basis, degree)?;
        let step = 1.0 / (n_interior + 1) as f64;
        Self::new(degree, (1..=n_interior).map(|i| i as f64 * step).collect())
    }

    /// `n_basis` functions with interior knots at empirical quantiles of
    /// `values` (which must lie in `[0, 1]`). Falls back to uniform spacing
    /// when the quantiles collapse.
    pub fn quantile(values: &[f64], n_basis: usize, degree: usize) -> Result<Self> {
        let n_interior = Self::interior_count(n_basis, degree)?;
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Self::uniform(n_basis, degree);
        }
        sorted.sort_by(f64::total_cmp);
        let knots: Vec<f64> = (1..=n_interior)
            .map(|i| {
                let pos = i as f64 / (n_interior + 1) as f64 * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
            })
            .collect();
        Self::new(degree, knots).or_else(|_| Self::uniform(n_basis, degree))
    }

    fn interior_count(n_basis: usize, degree: usize) -> Result<usize> {
        n_basis.checked_sub(degree + 1).ok_or_else(|| {
            VcmmError::InvalidSpec(format!(
                "a degree-{degree} basis needs at least {} functions, got {n_basis}",
                degree + 1
            ))
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions `Q_m`.
    pub fn len(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Knot span `s` with `knots[s] <= x < knots[s + 1]`; the right boundary
    /// belongs to the last non-empty span.
    fn find_span(&self, x: f64) -> usize {
        let last = self.len() - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        // first knot strictly greater than x, minus one
        let upper = self.knots[..=last + 1].partition_point(|&k| k <= x);
        (upper - 1).clamp(self.degree, last)
    }

    /// The `degree + 1` possibly non-zero functions at `x`, returned with the
    /// index of the first one. Triangular Cox-de Boor recursion.
    pub fn eval_local(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        if !(0.0..=1.0).contains(&x) {
            return Err(VcmmError::IndexOutOfDomain { row: 0, margin: 0, value: x });
        }
        let p = self.degree;
        let span = self.find_span(x);
        let t = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((span - p, n))
    }

    /// All `Q_m` basis values at `x`.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let (start, local) = self.eval_local(x)?;
        let mut out = vec![0.0; self.len()];
        out[start..start + local.len()].copy_from_slice(&local);
        Ok(out)
    }
}

/// Convenience wrapper matching the operation name used by callers.
pub fn eval_univariate(basis: &UnivariateBasis, x: f64) -> Result<Vec<f64>> {
    basis.eval(x)
}

/// Tensor product of univariate bases, one per index variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSplineBasis {
    margins: Vec<UnivariateBasis>,
}

impl TensorSplineBasis {
    pub fn new(margins: Vec<UnivariateBasis>) -> Result<Self> {
        if margins.is_empty() {
            return Err(VcmmError::InvalidSpec("a tensor basis needs at least one margin".into()));
        }
        Ok(Self { margins })
    }

    pub fn univariate(basis: UnivariateBasis) -> Self {
        Self { margins: vec![basis] }
    }

    pub fn margins(&self) -> &[UnivariateBasis] {
        &self.margins
    }

    pub fn n_index(&self) -> usize {
        self.margins.len()
    }

    /// Total basis size `Q`.
    pub fn len(&self) -> usize {
        self.margins.iter().map(UnivariateBasis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Upper bound on non-zeros per evaluation.
    pub fn max_nonzeros(&self) -> usize {
        self.margins.iter().map(|m| m.degree() + 1).product()
    }

    fn check_len(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.margins.len() {
            return Err(VcmmError::DimensionMismatch { field: "h", expected: self.margins.len(), found: h.len() });
        }
        Ok(())
    }

    /// Non-zero entries of `Phi(h)` as `(flat index, value)` in increasing
    /// index order.
    pub fn eval_sparse(&self, h: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_len(h)?;
        let mut acc: Vec<(usize, f64)> = vec![(0, 1.0)];
        for (m, (basis, &x)) in self.margins.iter().zip(h).enumerate() {
            let (start, local) = basis.eval_local(x).map_err(|e| match e {
                VcmmError::IndexOutOfDomain { value, .. } => VcmmError::IndexOutOfDomain { row: 0, margin: m, value },
                other => other,
            })?;
            let qm = basis.len();
            let mut next = Vec::with_capacity(acc.len() * local.len());
            for &(idx, v) in &acc {
                for (offset, &w) in local.iter().enumerate() {
                    next.push((idx * qm + start + offset, v * w));
                }
            }
            acc = next;
        }
        Ok(acc)
    }

    /// Dense `Phi(h)` of length `Q`.
    pub fn eval(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        for (idx, v) in self.eval_sparse(h)? {
            out[idx] = v;
        }
        Ok(out)
    }
}

pub fn eval_tensor(basis: &TensorSplineBasis, h: &[f64]) -> Result<Vec<f64>> {
    basis.eval(h)
}

/// Non-zero entries of one expanded design row
/// `[Phi(h), x_1 Phi(h), ..., x_p Phi(h)]`, in increasing column order.
pub fn expand_row_sparse(basis: &TensorSplineBasis, x_row: &[f64], h_row: &[f64]) -> Result<Vec<(usize, f64)>> {
    let phi = basis.eval_sparse(h_row)?;
    let q = basis.len();
    let mut out = Vec::with_capacity(phi.len() * (x_row.len() + 1));
    out.extend_from_slice(&phi);
    for (k, &xk) in x_row.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let offset = (k + 1) * q;
        out.extend(phi.iter().map(|&(idx, v)| (offset + idx, xk * v)));
    }
    Ok(out)
}

/// The expanded design `X~` (`n x (p + 1) Q`): intercept block first, then
/// one block per covariate in input order.
pub fn expand_design(x: &DMatrix<f64>, h: &DMatrix<f64>, basis: &TensorSplineBasis) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if x.nrows() != n {
        return Err(VcmmError::DimensionMismatch { field: "x rows", expected: n, found: x.nrows() });
    }
    if h.ncols() != basis.n_index() {
        return Err(VcmmError::DimensionMismatch { field: "h columns", expected: basis.n_index(), found: h.ncols() });
    }
    let width = (x.ncols() + 1) * basis.len();
    let mut out = DMatrix::zeros(n, width);
    let mut h_row = vec![0.0; h.ncols()];
    let mut x_row = vec![0.0; x.ncols()];
    for r in 0..n {
        h_row.iter_mut().enumerate().for_each(|(j, v)| *v = h[(r, j)]);
        x_row.iter_mut().enumerate().for_each(|(j, v)| *v = x[(r, j)]);
        let entries = expand_row_sparse(basis, &x_row, &h_row).map_err(|e| match e {
            VcmmError::IndexOutOfDomain { margin, value, .. } => VcmmError::IndexOutOfDomain { row: r, margin, value },
            other => other,
        })?;
        for (c, v) in entries {
            out[(r, c)] = v;
        }
    }
    Ok(out)
}

/// Evaluates coefficient function `k` (0 = intercept) at `h` given the
/// stacked coefficient vector.
pub fn coefficient_function(basis: &TensorSplineBasis, beta: &DVector<f64>, k: usize, h: &[f64]) -> Result<f64> {
    let q = basis.len();
    let phi = basis.eval_sparse(h)?;
    Ok(phi.iter().map(|&(idx, v)| v * beta[k * q + idx]).sum())
}

/// Serializable description of a tensor basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginSpec {
    pub degree: usize,
    /// Number of basis functions; interior knots are equally spaced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_basis: Option<usize>,
    /// Explicit interior knots. Takes precedence over `n_basis`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interior_knots: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub margins: Vec<MarginSpec>,
}

impl BasisSpec {
    pub fn cubic(sizes: &[usize]) -> Self {
        Self {
            margins: sizes.iter().map(|&n| MarginSpec { degree: 3, n_basis: Some(n), interior_knots: None }).collect(),
        }
    }

    pub fn build(&self) -> Result<TensorSplineBasis> {
        let margins = self
            .margins
            .iter()
            .map(|m| match (&m.interior_knots, m.n_basis) {
                (Some(knots), _) => UnivariateBasis::new(m.degree, knots.clone()),
                (None, Some(n)) => UnivariateBasis::uniform(n, m.degree),
                (None, None) => Err(VcmmError::InvalidSpec("margin needs n_basis or interior_knots".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        TensorSplineBasis::new(margins)
    }

    pub fn from_basis(basis: &TensorSplineBasis) -> Self {
        Self {
            margins: basis
                .margins()
                .iter()
                .map(|m| MarginSpec {
                    degree: m.degree(),
                    n_basis: Some(m.len()),
                    interior_knots: Some(m.interior_knots().to_vec()),
                })
                .collect(),
        }
    }
}

/// Column orthonormalization of an evaluated basis block.
///
/// Built from the Gram matrix `Phi^T Phi` of the basis columns: with
/// `Phi^T Phi = L L^T`, the transform `T = L^{-T}` makes `Phi T` orthonormal
/// (the same result as Gram-Schmidt on the columns). Coefficients fitted on
/// the transformed design map back through `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Orthogonalizer {
    transform: DMatrix<f64>,
}

impl Orthogonalizer {
    pub fn from_gram(gram: &DMatrix<f64>) -> Result<Self> {
        let chol = gram.clone().cholesky().ok_or_else(|| VcmmError::Singular {
            what: "basis Gram matrix",
            min_eigenvalue: gram.clone().symmetric_eigenvalues().min(),
        })?;
        let l = chol.l();
        let l_inv = l.try_inverse().ok_or(VcmmError::Singular { what: "basis Gram factor", min_eigenvalue: 0.0 })?;
        Ok(Self { transform: l_inv.transpose() })
    }

    pub fn transform(&self) -> &DMatrix<f64> {
        &self.transform
    }

    /// Block-diagonal transform for `n_blocks` coefficient blocks.
    pub fn block_transform(&self, n_blocks: usize) -> DMatrix<f64> {
        let q = self.transform.nrows();
        let mut out = DMatrix::zeros(q * n_blocks, q * n_blocks);
        for k in 0..n_blocks {
            out.view_mut((k * q, k * q), (q, q)).copy_from(&self.transform);
        }
        out
    }

    /// Applies the transform to every coefficient block of an expanded design.
    pub fn transform_design(&self, design: &DMatrix<f64>) -> DMatrix<f64> {
        let blocks = design.ncols() / self.transform.nrows();
        design * self.block_transform(blocks)
    }

    /// Maps coefficients of the transformed design back to the B-spline
    /// coefficients.
    pub fn back_transform(&self, coef: &DVector<f64>) -> DVector<f64> {
        let blocks = coef.len() / self.transform.nrows();
        self.block_transform(blocks) * coef
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bernstein3(x: f64) -> [f64; 4] {
        let u = 1.0 - x;
        [u * u * u, 3.0 * x * u * u, 3.0 * x * x * u, x * x * x]
    }

    #[test]
    fn degree_zero_is_indicator() {
        let b = UnivariateBasis::new(0, vec![0.5]).unwrap();
        assert_eq!(b.eval(0.25).unwrap(), vec![1.0, 0.0]);
        assert_eq!(b.eval(0.75).unwrap(), vec![0.0, 1.0]);
        assert_eq!(b.eval(1.0).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn cubic_without_interior_knots_is_bernstein() {
        let b = UnivariateBasis::uniform(4, 3).unwrap();
        let v = b.eval(0.5).unwrap();
        for (got, want) in v.iter().zip([0.125, 0.375, 0.375, 0.125]) {
            assert_relative_eq!(*got, want, epsilon = 1e-15);
        }
    }

    #[test]
    fn right_boundary_assigns_last_function() {
        let b = UnivariateBasis::uniform(19, 3).unwrap();
        let v = b.eval(1.0).unwrap();
        assert_eq!(v[18], 1.0);
        assert!(v[..18].iter().all(|&x| x == 0.0));
        let v0 = b.eval(0.0).unwrap();
        assert_eq!(v0[0], 1.0);
    }

    #[test]
    fn nineteen_cubic_functions_use_fifteen_interior_knots() {
        let b = UnivariateBasis::uniform(19, 3).unwrap();
        assert_eq!(b.interior_knots().len(), 15);
        assert_eq!(b.knots().len(), 23);
    }

    #[test]
    fn domain_errors() {
        let b = UnivariateBasis::uniform(5, 2).unwrap();
        assert!(b.eval(-0.01).is_err());
        assert!(b.eval(1.01).is_err());
        let t = TensorSplineBasis::new(vec![b.clone(), b]).unwrap();
        assert!(matches!(t.eval(&[0.2, 1.3]), Err(VcmmError::IndexOutOfDomain { margin: 1, .. })));
    }

    #[test]
    fn too_few_functions_is_an_error() {
        assert!(UnivariateBasis::uniform(3, 3).is_err());
        assert!(UnivariateBasis::new(2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bases = [
            UnivariateBasis::uniform(19, 3).unwrap(),
            UnivariateBasis::uniform(7, 1).unwrap(),
            UnivariateBasis::new(2, vec![0.1, 0.15, 0.7]).unwrap(),
        ];
        for b in &bases {
            for _ in 0..1000 {
                let x: f64 = rng.random();
                let v = b.eval(x).unwrap();
                assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(v.iter().all(|&e| e >= 0.0));
                assert!(v.iter().filter(|&&e| e != 0.0).count() <= b.degree() + 1);
            }
            assert!((b.eval(0.37).unwrap().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn tensor_of_one_margin_is_univariate() {
        let b = UnivariateBasis::uniform(8, 3).unwrap();
        let t = TensorSplineBasis::univariate(b.clone());
        assert_eq!(t.eval(&[0.3]).unwrap(), b.eval(0.3).unwrap());
    }

    #[test]
    fn tensor_of_indicators_is_one_hot() {
        let b = UnivariateBasis::new(0, vec![0.5]).unwrap();
        let t = TensorSplineBasis::new(vec![b.clone(), b]).unwrap();
        // cell (0, 1) with the last margin fastest
        assert_eq!(t.eval(&[0.25, 0.75]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cubic_tensor_is_outer_product_of_bernstein() {
        let b = UnivariateBasis::uniform(4, 3).unwrap();
        let t = TensorSplineBasis::new(vec![b.clone(), b]).unwrap();
        let (h1, h2) = (0.5, 0.2);
        let got = t.eval(&[h1, h2]).unwrap();
        let (u, v) = (bernstein3(h1), bernstein3(h2));
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(got[i * 4 + j], u[i] * v[j], epsilon = 1e-15);
            }
        }
        assert_relative_eq!(got.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    fn naive_expand(x: &DMatrix<f64>, h: &DMatrix<f64>, basis: &TensorSplineBasis) -> DMatrix<f64> {
        let q = basis.len();
        let p = x.ncols();
        let mut out = DMatrix::zeros(x.nrows(), (p + 1) * q);
        for r in 0..x.nrows() {
            let hr: Vec<f64> = h.row(r).iter().copied().collect();
            let phi = basis.eval(&hr).unwrap();
            let mut mult = vec![1.0];
            mult.extend(x.row(r).iter().copied());
            for (k, m) in mult.iter().enumerate() {
                for (j, f) in phi.iter().enumerate() {
                    out[(r, k * q + j)] = m * f;
                }
            }
        }
        out
    }

    #[test]
    fn expand_design_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let basis = TensorSplineBasis::univariate(UnivariateBasis::uniform(6, 3).unwrap());
        let x = DMatrix::from_fn(3, 1, |_, _| rng.random_range(-2.0..2.0));
        let h = DMatrix::from_fn(3, 1, |_, _| rng.random());
        assert_eq!(expand_design(&x, &h, &basis).unwrap(), naive_expand(&x, &h, &basis));
    }

    #[test]
    fn expand_design_intercept_only_and_zero_covariate() {
        let basis = TensorSplineBasis::univariate(UnivariateBasis::uniform(5, 2).unwrap());
        let h = DMatrix::from_row_slice(2, 1, &[0.1, 0.9]);
        let d0 = expand_design(&DMatrix::zeros(2, 0), &h, &basis).unwrap();
        for r in 0..2 {
            let phi = basis.eval(&[h[(r, 0)]]).unwrap();
            assert_eq!(d0.row(r).iter().copied().collect::<Vec<_>>(), phi);
        }
        let d1 = expand_design(&DMatrix::zeros(1, 1), &h.rows(0, 1).into_owned(), &basis).unwrap();
        assert!(d1.view((0, 5), (1, 5)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expand_design_is_stacked_scaled_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = UnivariateBasis::uniform(5, 3).unwrap();
        let basis = TensorSplineBasis::new(vec![b.clone(), b]).unwrap();
        let n = 20;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let h = DMatrix::from_fn(n, 2, |_, _| rng.random());
        let full = expand_design(&x, &h, &basis).unwrap();
        let base = expand_design(&DMatrix::zeros(n, 0), &h, &basis).unwrap();
        let q = basis.len();
        for r in 0..n {
            for j in 0..q {
                assert_eq!(full[(r, j)], base[(r, j)]);
                for k in 0..2 {
                    assert_eq!(full[(r, (k + 1) * q + j)], x[(r, k)] * base[(r, j)]);
                }
            }
            assert!(base.row(r).iter().filter(|&&v| v != 0.0).count() <= basis.max_nonzeros());
        }
    }

    #[test]
    fn linear_functions_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let basis = TensorSplineBasis::univariate(UnivariateBasis::uniform(9, 1).unwrap());
        let n = 200;
        let h = DMatrix::from_fn(n, 1, |_, _| rng.random());
        let y = DVector::from_fn(n, |i, _| 0.3 - 1.7 * h[(i, 0)]);
        let design = expand_design(&DMatrix::zeros(n, 0), &h, &basis).unwrap();
        let coef = design.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        assert!((design * coef - y).amax() <= 1e-10);
    }

    #[test]
    fn basis_spec_round_trip() {
        let spec = BasisSpec::cubic(&[12, 12]);
        let basis = spec.build().unwrap();
        assert_eq!(basis.len(), 144);
        let again = BasisSpec::from_basis(&basis).build().unwrap();
        assert_eq!(again, basis);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<BasisSpec>(&json).unwrap(), spec);
    }

    #[test]
    fn quantile_knots_follow_data() {
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 / 999.0).powi(3)).collect();
        let b = UnivariateBasis::quantile(&values, 8, 3).unwrap();
        assert_eq!(b.len(), 8);
        assert!(b.interior_knots()[0] < 0.2 * 0.2);
    }

    #[test]
    fn orthogonalizer_yields_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let basis = TensorSplineBasis::univariate(UnivariateBasis::uniform(7, 3).unwrap());
        let n = 300;
        let h = DMatrix::from_fn(n, 1, |_, _| rng.random());
        let design = expand_design(&DMatrix::zeros(n, 0), &h, &basis).unwrap();
        let orth = Orthogonalizer::from_gram(&(design.transpose() * &design)).unwrap();
        let t = orth.transform_design(&design);
        assert!((t.transpose() * &t - DMatrix::identity(7, 7)).amax() < 1e-10);
        let gamma = DVector::from_fn(7, |i, _| i as f64);
        let beta = orth.back_transform(&gamma);
        assert!((&design * beta - t * gamma).amax() < 1e-10);
    }
}
