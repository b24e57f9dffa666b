//! Shared domain types: model dimensions, data partitions, parameters,
//! random-effect covariance structures and the smoothing penalty.
//!
//! Every type here is a plain value. Once built, nothing mutates it in place,
//! so partitions and parameters can be handed to concurrent workers by
//! reference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};

/// Variances below this are treated as numerically zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Relative ridge added to a projected full covariance before inversion.
pub const FULL_COV_RIDGE: f64 = 1e-8;

/// Dimension bookkeeping for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Non-intercept covariates `p`.
    pub n_covariates: usize,
    /// Tensor basis size `Q` (product of marginal sizes).
    pub basis_size: usize,
    /// Random-effect dimension `q`.
    pub n_random: usize,
    /// Index-variable components `M`.
    pub n_index: usize,
    /// Partitions `K`.
    pub n_partitions: usize,
    /// Total observations `N`.
    pub n_obs: usize,
}

impl ModelDims {
    pub fn new(
        n_covariates: usize,
        basis_size: usize,
        n_random: usize,
        n_index: usize,
        n_partitions: usize,
        n_obs: usize,
    ) -> Result<Self> {
        if basis_size == 0 {
            return Err(VcmmError::InvalidSpec("basis size must be at least 1".into()));
        }
        if n_index == 0 {
            return Err(VcmmError::InvalidSpec("at least one index variable is required".into()));
        }
        if n_partitions == 0 {
            return Err(VcmmError::InvalidSpec("at least one partition is required".into()));
        }
        Ok(Self { n_covariates, basis_size, n_random, n_index, n_partitions, n_obs })
    }

    /// Length of the fixed-effect coefficient vector, `(p + 1) Q`.
    pub fn fixed_len(&self) -> usize {
        (self.n_covariates + 1) * self.basis_size
    }

    /// Full parameter dimension `d = (p + 1) Q + q`.
    pub fn param_len(&self) -> usize {
        self.fixed_len() + self.n_random
    }
}

/// One node's raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub id: u32,
    pub y: DVector<f64>,
    /// Raw covariates, `n_k x p`.
    pub x: DMatrix<f64>,
    /// Index variables, `n_k x M`, each column within `[0, 1]`.
    pub h: DMatrix<f64>,
    /// Random-effect design, `n_k x q`.
    pub z: DMatrix<f64>,
}

impl Partition {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// An empty partition with the given column counts.
    pub fn empty(id: u32, n_covariates: usize, n_index: usize, n_random: usize) -> Self {
        Self {
            id,
            y: DVector::zeros(0),
            x: DMatrix::zeros(0, n_covariates),
            h: DMatrix::zeros(0, n_index),
            z: DMatrix::zeros(0, n_random),
        }
    }

    /// Rows `range` of this partition as a new partition with the same id.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self {
            id: self.id,
            y: self.y.rows(start, len).into_owned(),
            x: self.x.rows(start, len).into_owned(),
            h: self.h.rows(start, len).into_owned(),
            z: self.z.rows(start, len).into_owned(),
        }
    }

    /// Row-wise concatenation of several partitions. The result takes the
    /// id of the first partition.
    pub fn concat(parts: &[Partition]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| VcmmError::InvalidSpec("cannot concatenate zero partitions".into()))?;
        let (p, m, q) = (first.x.ncols(), first.h.ncols(), first.z.ncols());
        let n: usize = parts.iter().map(Partition::n_rows).sum();
        let mut out = Partition {
            id: first.id,
            y: DVector::zeros(n),
            x: DMatrix::zeros(n, p),
            h: DMatrix::zeros(n, m),
            z: DMatrix::zeros(n, q),
        };
        let mut offset = 0;
        for part in parts {
            if part.x.ncols() != p {
                return Err(VcmmError::DimensionMismatch { field: "x", expected: p, found: part.x.ncols() });
            }
            if part.h.ncols() != m {
                return Err(VcmmError::DimensionMismatch { field: "h", expected: m, found: part.h.ncols() });
            }
            if part.z.ncols() != q {
                return Err(VcmmError::DimensionMismatch { field: "z", expected: q, found: part.z.ncols() });
            }
            let nk = part.n_rows();
            out.y.rows_mut(offset, nk).copy_from(&part.y);
            out.x.rows_mut(offset, nk).copy_from(&part.x);
            out.h.rows_mut(offset, nk).copy_from(&part.h);
            out.z.rows_mut(offset, nk).copy_from(&part.z);
            offset += nk;
        }
        Ok(out)
    }
}

/// Checks every partition invariant against `dims`.
pub fn validate_partition(part: &Partition, dims: &ModelDims) -> Result<()> {
    let n = part.y.len();
    let checks: [(&'static str, usize, usize); 3] =
        [("x", part.x.nrows(), n), ("h", part.h.nrows(), n), ("z", part.z.nrows(), n)];
    for (field, rows, expected) in checks {
        if rows != expected {
            return Err(VcmmError::DimensionMismatch { field, expected, found: rows });
        }
    }
    if part.x.ncols() != dims.n_covariates {
        return Err(VcmmError::DimensionMismatch {
            field: "x columns",
            expected: dims.n_covariates,
            found: part.x.ncols(),
        });
    }
    if part.h.ncols() != dims.n_index {
        return Err(VcmmError::DimensionMismatch { field: "h columns", expected: dims.n_index, found: part.h.ncols() });
    }
    if part.z.ncols() != dims.n_random {
        return Err(VcmmError::DimensionMismatch {
            field: "z columns",
            expected: dims.n_random,
            found: part.z.ncols(),
        });
    }
    if part.y.iter().any(|v| !v.is_finite()) {
        return Err(VcmmError::NonFinite("y"));
    }
    if part.x.iter().any(|v| !v.is_finite()) {
        return Err(VcmmError::NonFinite("x"));
    }
    if part.z.iter().any(|v| !v.is_finite()) {
        return Err(VcmmError::NonFinite("z"));
    }
    for row in 0..n {
        for margin in 0..part.h.ncols() {
            let value = part.h[(row, margin)];
            if !(0.0..=1.0).contains(&value) {
                return Err(VcmmError::IndexOutOfDomain { row, margin, value });
            }
        }
    }
    Ok(())
}

/// Per-margin affine map of raw index variables onto `[0, 1]`.
///
/// Stored alongside a fit so new data is evaluated on the same scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexScaling {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl IndexScaling {
    pub fn identity(n_index: usize) -> Self {
        Self { lower: vec![0.0; n_index], upper: vec![1.0; n_index] }
    }

    /// Column ranges over all partitions.
    pub fn from_partitions(parts: &[Partition]) -> Result<Self> {
        let m = parts.first().map(|p| p.h.ncols()).unwrap_or(0);
        let mut lower = vec![f64::INFINITY; m];
        let mut upper = vec![f64::NEG_INFINITY; m];
        for part in parts {
            if part.h.ncols() != m {
                return Err(VcmmError::DimensionMismatch { field: "h columns", expected: m, found: part.h.ncols() });
            }
            for (j, col) in part.h.column_iter().enumerate() {
                for &v in col.iter() {
                    if !v.is_finite() {
                        return Err(VcmmError::NonFinite("h"));
                    }
                    lower[j] = lower[j].min(v);
                    upper[j] = upper[j].max(v);
                }
            }
        }
        for j in 0..m {
            if !lower[j].is_finite() {
                lower[j] = 0.0;
                upper[j] = 1.0;
            } else if upper[j] <= lower[j] {
                upper[j] = lower[j] + 1.0;
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn scale(&self, margin: usize, value: f64) -> f64 {
        let t = (value - self.lower[margin]) / (self.upper[margin] - self.lower[margin]);
        t.clamp(0.0, 1.0)
    }

    pub fn apply(&self, part: &Partition) -> Partition {
        let mut out = part.clone();
        for (j, mut col) in out.h.column_iter_mut().enumerate() {
            col.apply(|v| *v = self.scale(j, *v));
        }
        out
    }
}

/// One block of a block-isotropic covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovBlock {
    pub size: usize,
    pub sigma2: f64,
}

/// Covariance structure of the random effects `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure", rename_all = "snake_case")]
pub enum RandomEffectCov {
    Isotropic {
        sigma2: f64,
    },
    BlockIsotropic {
        blocks: Vec<CovBlock>,
    },
    /// Dense covariance; `ridge` is added to the diagonal before any use.
    Full {
        matrix: DMatrix<f64>,
        ridge: f64,
    },
}

impl RandomEffectCov {
    pub fn isotropic(sigma2: f64) -> Self {
        RandomEffectCov::Isotropic { sigma2 }
    }

    pub fn block_isotropic(blocks: &[(usize, f64)]) -> Self {
        RandomEffectCov::BlockIsotropic {
            blocks: blocks.iter().map(|&(size, sigma2)| CovBlock { size, sigma2 }).collect(),
        }
    }

    pub fn full(matrix: DMatrix<f64>, ridge: f64) -> Self {
        RandomEffectCov::Full { matrix, ridge }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        match self {
            RandomEffectCov::Isotropic { sigma2 } => {
                if !(*sigma2 > 0.0) || !sigma2.is_finite() {
                    return Err(VcmmError::NonPositiveVariance(*sigma2));
                }
            }
            RandomEffectCov::BlockIsotropic { blocks } => {
                let total: usize = blocks.iter().map(|b| b.size).sum();
                if total != q {
                    return Err(VcmmError::DimensionMismatch { field: "covariance blocks", expected: q, found: total });
                }
                if let Some(b) = blocks.iter().find(|b| !(b.sigma2 > 0.0) || !b.sigma2.is_finite()) {
                    return Err(VcmmError::NonPositiveVariance(b.sigma2));
                }
            }
            RandomEffectCov::Full { matrix, ridge } => {
                if matrix.nrows() != q || matrix.ncols() != q {
                    return Err(VcmmError::DimensionMismatch {
                        field: "covariance matrix",
                        expected: q,
                        found: matrix.nrows(),
                    });
                }
                if *ridge < 0.0 {
                    return Err(VcmmError::InvalidSpec("covariance ridge must be nonnegative".into()));
                }
                let asym = max_asymmetry(matrix);
                if asym > 1e-10 * (1.0 + matrix.amax()) {
                    return Err(VcmmError::NotSymmetric(asym));
                }
                self.cholesky(q)?;
            }
        }
        Ok(())
    }

    /// Diagonal of the implied matrix for the diagonal structures.
    fn diagonal(&self, q: usize) -> Option<DVector<f64>> {
        match self {
            RandomEffectCov::Isotropic { sigma2 } => Some(DVector::from_element(q, *sigma2)),
            RandomEffectCov::BlockIsotropic { blocks } => {
                let mut out = Vec::with_capacity(q);
                for b in blocks {
                    out.extend(std::iter::repeat_n(b.sigma2, b.size));
                }
                Some(DVector::from_vec(out))
            }
            RandomEffectCov::Full { .. } => None,
        }
    }

    fn cholesky(&self, q: usize) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let m = self.matrix(q);
        m.clone().cholesky().ok_or_else(|| VcmmError::Singular {
            what: "random-effect covariance",
            min_eigenvalue: m.symmetric_eigenvalues().min(),
        })
    }

    /// The implied `q x q` covariance matrix (including any ridge).
    pub fn matrix(&self, q: usize) -> DMatrix<f64> {
        match self {
            RandomEffectCov::Full { matrix, ridge } => {
                let mut m = symmetrize(matrix);
                for i in 0..q {
                    m[(i, i)] += ridge;
                }
                m
            }
            _ => DMatrix::from_diagonal(&self.diagonal(q).expect("diagonal structure")),
        }
    }

    /// `Sigma_alpha^{-1}`.
    pub fn inverse(&self, q: usize) -> Result<DMatrix<f64>> {
        self.validate(q)?;
        match self.diagonal(q) {
            Some(diag) => Ok(DMatrix::from_diagonal(&diag.map(|v| 1.0 / v))),
            None => {
                let mut inv = self.cholesky(q)?.inverse();
                symmetrize_in_place(&mut inv);
                Ok(inv)
            }
        }
    }

    /// `log det Sigma_alpha`.
    pub fn logdet(&self, q: usize) -> Result<f64> {
        self.validate(q)?;
        match self.diagonal(q) {
            Some(diag) => Ok(diag.iter().map(|v| v.ln()).sum()),
            None => {
                let chol = self.cholesky(q)?;
                Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
            }
        }
    }

    /// Variance update from the current random effects, projected onto this
    /// structure. The raw moment estimate `alpha alpha^T / q` has rank one, so
    /// it is never used directly: isotropic and block structures average the
    /// squared effects within each block, and the full structure adds a
    /// trace-scaled ridge.
    pub fn project(&self, alpha: &DVector<f64>) -> Self {
        let q = alpha.len();
        match self {
            RandomEffectCov::Isotropic { .. } => {
                let s = if q == 0 { 1.0 } else { alpha.norm_squared() / q as f64 };
                RandomEffectCov::Isotropic { sigma2: s.max(VARIANCE_FLOOR) }
            }
            RandomEffectCov::BlockIsotropic { blocks } => {
                let mut offset = 0;
                let blocks = blocks
                    .iter()
                    .map(|b| {
                        let seg = alpha.rows(offset, b.size);
                        offset += b.size;
                        let s = if b.size == 0 { 1.0 } else { seg.norm_squared() / b.size as f64 };
                        CovBlock { size: b.size, sigma2: s.max(VARIANCE_FLOOR) }
                    })
                    .collect();
                RandomEffectCov::BlockIsotropic { blocks }
            }
            RandomEffectCov::Full { .. } => {
                let qf = q.max(1) as f64;
                let matrix = alpha * alpha.transpose() / qf;
                let ridge = (FULL_COV_RIDGE * matrix.trace() / qf).max(VARIANCE_FLOOR);
                RandomEffectCov::Full { matrix, ridge }
            }
        }
    }

    /// Scalars needed to transmit this structure.
    pub fn scalar_count(&self) -> usize {
        match self {
            RandomEffectCov::Isotropic { .. } => 1,
            RandomEffectCov::BlockIsotropic { blocks } => blocks.len(),
            RandomEffectCov::Full { matrix, .. } => matrix.nrows() * (matrix.nrows() + 1) / 2 + 1,
        }
    }

    /// Variance parameters as a flat list (one per block, or the diagonal
    /// for the full structure).
    pub fn variances(&self) -> Vec<f64> {
        match self {
            RandomEffectCov::Isotropic { sigma2 } => vec![*sigma2],
            RandomEffectCov::BlockIsotropic { blocks } => blocks.iter().map(|b| b.sigma2).collect(),
            RandomEffectCov::Full { matrix, ridge } => matrix.diagonal().iter().map(|v| v + ridge).collect(),
        }
    }
}

/// Residual and random-effect variance components `(sigma2_eps, Sigma_alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_eps: f64,
    pub sigma_alpha: RandomEffectCov,
}

impl VarianceComponents {
    pub fn new(sigma2_eps: f64, sigma_alpha: RandomEffectCov) -> Self {
        Self { sigma2_eps, sigma_alpha }
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if !(self.sigma2_eps > 0.0) || !self.sigma2_eps.is_finite() {
            return Err(VcmmError::NonPositiveVariance(self.sigma2_eps));
        }
        self.sigma_alpha.validate(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Ridge,
    SecondDifference,
}

/// Smoothing penalty on the spline coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    /// Optional per-block weights (intercept block first). When present they
    /// replace `lambda` block by block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_lambdas: Option<Vec<f64>>,
    /// Marginal basis sizes of a tensor basis. When present, differences are
    /// taken along each margin and summed; otherwise along the flattened
    /// index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_sizes: Option<Vec<usize>>,
}

impl PenaltySpec {
    pub fn ridge(lambda: f64) -> Self {
        Self { kind: PenaltyKind::Ridge, lambda, block_lambdas: None, margin_sizes: None }
    }

    pub fn second_difference(lambda: f64) -> Self {
        Self { kind: PenaltyKind::SecondDifference, lambda, block_lambdas: None, margin_sizes: None }
    }

    /// Second differences along every margin of a tensor basis.
    pub fn tensor_second_difference(lambda: f64, margin_sizes: &[usize]) -> Self {
        Self { margin_sizes: Some(margin_sizes.to_vec()), ..Self::second_difference(lambda) }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    fn block_weight(&self, block: usize) -> f64 {
        self.block_lambdas.as_ref().map_or(self.lambda, |w| w[block])
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(VcmmError::InvalidSpec(format!("penalty weight must be nonnegative, got {}", self.lambda)));
        }
        if let Some(w) = &self.block_lambdas {
            if w.len() != dims.n_covariates + 1 {
                return Err(VcmmError::DimensionMismatch {
                    field: "block_lambdas",
                    expected: dims.n_covariates + 1,
                    found: w.len(),
                });
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(VcmmError::InvalidSpec("per-block penalty weights must be nonnegative".into()));
            }
        }
        if let Some(m) = &self.margin_sizes {
            let product: usize = m.iter().product();
            if product != dims.basis_size {
                return Err(VcmmError::DimensionMismatch {
                    field: "margin_sizes",
                    expected: dims.basis_size,
                    found: product,
                });
            }
        }
        Ok(())
    }
}

/// `D^T D` for the `(n - 2) x n` second-difference operator `D`.
pub fn second_difference_gram(n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for r in 0..n.saturating_sub(2) {
        let stencil = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(i, a) in &stencil {
            for &(j, b) in &stencil {
                out[(i, j)] += a * b;
            }
        }
    }
    out
}

/// `sum_m I x .. x D_m^T D_m x .. x I` over the margins, last margin
/// varying fastest.
pub fn tensor_difference_gram(sizes: &[usize]) -> DMatrix<f64> {
    let total: usize = sizes.iter().product();
    let mut out = DMatrix::zeros(total, total);
    for (m, &size) in sizes.iter().enumerate() {
        let before: usize = sizes[..m].iter().product();
        let after: usize = sizes[m + 1..].iter().product();
        let term = DMatrix::<f64>::identity(before, before)
            .kronecker(&second_difference_gram(size))
            .kronecker(&DMatrix::<f64>::identity(after, after));
        out += term;
    }
    out
}

/// Realizes `P_lambda` as a dense symmetric PSD matrix of size `(p + 1) Q`,
/// one diagonal block per coefficient function.
pub fn realize_penalty(spec: &PenaltySpec, dims: &ModelDims) -> Result<DMatrix<f64>> {
    spec.validate(dims)?;
    let q = dims.basis_size;
    let fixed = dims.fixed_len();
    let mut out = DMatrix::zeros(fixed, fixed);
    let block = match spec.kind {
        PenaltyKind::Ridge => DMatrix::identity(q, q),
        PenaltyKind::SecondDifference => match &spec.margin_sizes {
            Some(sizes) => tensor_difference_gram(sizes),
            None => second_difference_gram(q),
        },
    };
    for k in 0..=dims.n_covariates {
        let w = spec.block_weight(k);
        if w != 0.0 {
            out.view_mut((k * q, k * q), (q, q)).copy_from(&(&block * w));
        }
    }
    Ok(out)
}

/// A penalty specification together with its realized matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalty {
    pub spec: PenaltySpec,
    pub matrix: DMatrix<f64>,
}

impl Penalty {
    pub fn new(spec: PenaltySpec, dims: &ModelDims) -> Result<Self> {
        let matrix = realize_penalty(&spec, dims)?;
        Ok(Self { spec, matrix })
    }

    pub fn zero(dims: &ModelDims) -> Self {
        Self::new(PenaltySpec::ridge(0.0), dims).expect("zero ridge is always valid")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Full parameter set `theta = (beta, alpha)` plus variance components and
/// the smoothing penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub variance: VarianceComponents,
    pub penalty: Penalty,
}

impl ModelParams {
    pub fn new(
        beta: DVector<f64>,
        alpha: DVector<f64>,
        variance: VarianceComponents,
        penalty: Penalty,
    ) -> Result<Self> {
        let params = Self { beta, alpha, variance, penalty };
        params.validate()?;
        Ok(params)
    }

    /// Zero coefficients with the given variances and penalty.
    pub fn zeros(dims: &ModelDims, variance: VarianceComponents, penalty: Penalty) -> Result<Self> {
        Self::new(DVector::zeros(dims.fixed_len()), DVector::zeros(dims.n_random), variance, penalty)
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalty.dim() != self.beta.len() {
            return Err(VcmmError::DimensionMismatch {
                field: "beta",
                expected: self.penalty.dim(),
                found: self.beta.len(),
            });
        }
        if self.beta.iter().chain(self.alpha.iter()).any(|v| !v.is_finite()) {
            return Err(VcmmError::NonFinite("theta"));
        }
        self.variance.validate(self.alpha.len())
    }

    pub fn sigma2_eps(&self) -> f64 {
        self.variance.sigma2_eps
    }

    /// `theta = (beta, alpha)` stacked.
    pub fn theta(&self) -> DVector<f64> {
        stack(&self.beta, &self.alpha)
    }

    pub fn with_theta(&self, theta: &DVector<f64>) -> Self {
        let f = self.beta.len();
        Self { beta: theta.rows(0, f).into_owned(), alpha: theta.rows(f, theta.len() - f).into_owned(), ..self.clone() }
    }
}

pub(crate) fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

pub(crate) fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in (j + 1)..m.nrows() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(p: usize, q_basis: usize, q: usize) -> ModelDims {
        ModelDims::new(p, q_basis, q, 1, 1, 0).unwrap()
    }

    #[test]
    fn empty_partition_is_valid() {
        let d = dims(2, 5, 3);
        validate_partition(&Partition::empty(0, 2, 1, 3), &d).unwrap();
    }

    #[test]
    fn short_z_is_rejected() {
        let d = dims(1, 5, 3);
        let mut part = Partition::empty(0, 1, 1, 2);
        part.y = DVector::from_element(2, 1.0);
        part.x = DMatrix::zeros(2, 1);
        part.h = DMatrix::from_element(2, 1, 0.5);
        part.z = DMatrix::zeros(2, 2);
        match validate_partition(&part, &d) {
            Err(VcmmError::DimensionMismatch { field, expected: 3, found: 2 }) => assert_eq!(field, "z columns"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn index_outside_domain_is_rejected() {
        let d = dims(0, 4, 1);
        let part = Partition {
            id: 0,
            y: DVector::from_element(1, 0.0),
            x: DMatrix::zeros(1, 0),
            h: DMatrix::from_element(1, 1, 1.5),
            z: DMatrix::zeros(1, 1),
        };
        assert!(matches!(
            validate_partition(&part, &d),
            Err(VcmmError::IndexOutOfDomain { value, .. }) if value == 1.5
        ));
    }

    #[test]
    fn ridge_penalty_is_scaled_identity() {
        let d = dims(0, 3, 0);
        let p = realize_penalty(&PenaltySpec::ridge(2.0), &d).unwrap();
        assert_eq!(p, DMatrix::identity(3, 3) * 2.0);
    }

    #[test]
    fn zero_lambda_gives_zero_matrix() {
        let d = dims(2, 6, 0);
        for spec in [PenaltySpec::ridge(0.0), PenaltySpec::second_difference(0.0)] {
            let p = realize_penalty(&spec, &d).unwrap();
            assert!(p.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn second_difference_matches_hand_product() {
        // D2 = [[1,-2,1,0],[0,1,-2,1]]; D2^T D2 worked out by hand.
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[1.0, -2.0, 1.0, 0.0, -2.0, 5.0, -4.0, 1.0, 1.0, -4.0, 5.0, -2.0, 0.0, 1.0, -2.0, 1.0],
        );
        let d = dims(0, 4, 0);
        let p = realize_penalty(&PenaltySpec::second_difference(1.0), &d).unwrap();
        assert_eq!(p, expected);

        let d2 = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 1.0, 0.0, 0.0, 1.0, -2.0, 1.0]);
        assert_eq!(d2.transpose() * d2, expected);
    }

    #[test]
    fn penalty_is_psd_and_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = dims(2, 7, 0);
        for spec in [PenaltySpec::ridge(0.7), PenaltySpec::second_difference(0.7)] {
            let p = realize_penalty(&spec, &d).unwrap();
            for _ in 0..1000 {
                let x = DVector::from_fn(d.fixed_len(), |_, _| rng.random_range(-1.0..1.0));
                assert!((x.transpose() * &p * &x)[0] >= -1e-12);
            }
            let p2 = realize_penalty(&spec.with_lambda(1.4), &d).unwrap();
            assert_eq!(p2, &p * 2.0);
        }
    }

    #[test]
    fn per_block_lambdas() {
        let d = dims(1, 2, 0);
        let spec = PenaltySpec { block_lambdas: Some(vec![0.0, 3.0]), ..PenaltySpec::ridge(1.0) };
        let p = realize_penalty(&spec, &d).unwrap();
        assert_eq!(p, DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 3.0, 3.0])));
    }

    #[test]
    fn covariance_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = 6;
        let a = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
        let spd = &a * a.transpose() + DMatrix::identity(q, q);
        let structures = [
            RandomEffectCov::isotropic(0.3),
            RandomEffectCov::block_isotropic(&[(2, 0.5), (4, 2.0)]),
            RandomEffectCov::full(spd, 1e-8),
        ];
        for cov in structures {
            let m = cov.matrix(q);
            let inv = cov.inverse(q).unwrap();
            let err = (&m * &inv - DMatrix::identity(q, q)).norm();
            assert!(err <= 1e-10, "{cov:?}: {err}");
            assert_relative_eq!(
                cov.logdet(q).unwrap(),
                m.symmetric_eigenvalues().iter().map(|v| v.ln()).sum::<f64>(),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn projection_per_structure() {
        let alpha = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.0]);
        match RandomEffectCov::isotropic(1.0).project(&alpha) {
            RandomEffectCov::Isotropic { sigma2 } => assert_relative_eq!(sigma2, 6.0 / 4.0),
            other => panic!("{other:?}"),
        }
        match RandomEffectCov::block_isotropic(&[(2, 1.0), (2, 1.0)]).project(&alpha) {
            RandomEffectCov::BlockIsotropic { blocks } => {
                assert_relative_eq!(blocks[0].sigma2, 1.0);
                assert_relative_eq!(blocks[1].sigma2, 2.0);
            }
            other => panic!("{other:?}"),
        }
        let full = RandomEffectCov::full(DMatrix::identity(4, 4), 0.0).project(&alpha);
        full.validate(4).unwrap();
        assert!(full.inverse(4).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_alpha_projection_stays_positive() {
        let cov = RandomEffectCov::isotropic(1.0).project(&DVector::zeros(3));
        cov.validate(3).unwrap();
    }

    #[test]
    fn index_scaling_maps_to_unit_interval() {
        let part = Partition {
            id: 0,
            y: DVector::zeros(3),
            x: DMatrix::zeros(3, 0),
            h: DMatrix::from_row_slice(3, 2, &[10.0, -1.0, 20.0, 0.0, 15.0, 1.0]),
            z: DMatrix::zeros(3, 0),
        };
        let s = IndexScaling::from_partitions(std::slice::from_ref(&part)).unwrap();
        let scaled = s.apply(&part);
        assert_eq!(scaled.h, DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.5, 0.5, 1.0]));
    }

    #[test]
    fn tensor_difference_penalty() {
        assert_eq!(tensor_difference_gram(&[6]), second_difference_gram(6));
        let p = tensor_difference_gram(&[4, 5]);
        assert_eq!(p.nrows(), 20);
        let ones = DVector::from_element(20, 1.0);
        assert!((&p * &ones).amax() < 1e-12);
        // Linear in either margin lies in the null space.
        let lin1 = DVector::from_fn(20, |i, _| (i / 5) as f64);
        let lin2 = DVector::from_fn(20, |i, _| (i % 5) as f64);
        assert!((&p * lin1).amax() < 1e-12);
        assert!((&p * lin2).amax() < 1e-12);
        let curved = DVector::from_fn(20, |i, _| ((i % 5) as f64).powi(2));
        assert!(curved.dot(&(&p * &curved)) > 0.0);
        let dims = ModelDims::new(1, 20, 0, 2, 1, 10).unwrap();
        assert!(Penalty::new(PenaltySpec::tensor_second_difference(1.0, &[4, 4]), &dims).is_err());
    }
}
