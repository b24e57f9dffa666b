//! Per-partition sufficient statistics, their aggregation, and the penalized
//! joint objective and score evaluated from summaries alone.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::model::{stack, ModelParams, Partition};
use crate::spline::{expand_row_sparse, TensorSplineBasis};

/// `Gamma_k = (a, b, C, d, B, H, n)` for one partition, or the sum of several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    /// `a = sum y^2`.
    pub yy: f64,
    /// `b = X~^T y`.
    pub xy: DVector<f64>,
    /// `C = X~^T X~`.
    pub xx: DMatrix<f64>,
    /// `d = Z^T y`.
    pub zy: DVector<f64>,
    /// `B = X~^T Z`.
    pub xz: DMatrix<f64>,
    /// `H = Z^T Z`.
    pub zz: DMatrix<f64>,
    pub n: u64,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl SuffStats {
    pub fn zeros(fixed_len: usize, n_random: usize) -> Self {
        Self {
            yy: 0.0,
            xy: DVector::zeros(fixed_len),
            xx: DMatrix::zeros(fixed_len, fixed_len),
            zy: DVector::zeros(n_random),
            xz: DMatrix::zeros(fixed_len, n_random),
            zz: DMatrix::zeros(n_random, n_random),
            n: 0,
        }
    }

    pub fn fixed_len(&self) -> usize {
        self.xy.len()
    }

    pub fn n_random(&self) -> usize {
        self.zy.len()
    }

    pub fn param_len(&self) -> usize {
        self.fixed_len() + self.n_random()
    }

    /// Scalars in one transmitted summary with triangular storage of `C`
    /// and `H`.
    pub fn scalar_count(fixed_len: usize, n_random: usize) -> usize {
        1 + fixed_len
            + fixed_len * (fixed_len + 1) / 2
            + n_random
            + fixed_len * n_random
            + n_random * (n_random + 1) / 2
    }

    fn check_same_shape(&self, other: &SuffStats) -> Result<()> {
        if other.fixed_len() != self.fixed_len() {
            return Err(VcmmError::DimensionMismatch {
                field: "fixed-effect summaries",
                expected: self.fixed_len(),
                found: other.fixed_len(),
            });
        }
        if other.n_random() != self.n_random() {
            return Err(VcmmError::DimensionMismatch {
                field: "random-effect summaries",
                expected: self.n_random(),
                found: other.n_random(),
            });
        }
        Ok(())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &SuffStats) -> Result<()> {
        self.check_same_shape(other)?;
        self.yy += other.yy;
        self.xy += &other.xy;
        self.xx += &other.xx;
        self.zy += &other.zy;
        self.xz += &other.xz;
        self.zz += &other.zz;
        self.n += other.n;
        Ok(())
    }

    /// `[[C, B], [B^T, H]]`.
    pub fn gram(&self) -> DMatrix<f64> {
        let (f, q) = (self.fixed_len(), self.n_random());
        let mut g = DMatrix::zeros(f + q, f + q);
        g.view_mut((0, 0), (f, f)).copy_from(&self.xx);
        g.view_mut((0, f), (f, q)).copy_from(&self.xz);
        g.view_mut((f, 0), (q, f)).copy_from(&self.xz.transpose());
        g.view_mut((f, f), (q, q)).copy_from(&self.zz);
        g
    }

    /// `(b, d)` stacked.
    pub fn cross(&self) -> DVector<f64> {
        stack(&self.xy, &self.zy)
    }

    /// `||y - X~ beta - Z alpha||^2` expanded in summaries:
    /// `a - 2 beta^T b + beta^T C beta - 2 alpha^T d + 2 beta^T B alpha + alpha^T H alpha`.
    pub fn residual_ss(&self, beta: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
        let c_beta = &self.xx * beta;
        let b_alpha = &self.xz * alpha;
        let h_alpha = &self.zz * alpha;
        self.yy - 2.0 * beta.dot(&self.xy) + beta.dot(&c_beta) - 2.0 * alpha.dot(&self.zy)
            + 2.0 * beta.dot(&b_alpha)
            + alpha.dot(&h_alpha)
    }

    /// Every summary multiplied by `n_target / n`, as if the partition stood
    /// for `n_target` rows.
    pub fn scaled_to(&self, n_target: u64) -> Result<SuffStats> {
        if self.n == 0 {
            return Err(VcmmError::InvalidSpec("cannot rescale empty summaries".into()));
        }
        let w = n_target as f64 / self.n as f64;
        Ok(SuffStats {
            yy: self.yy * w,
            xy: &self.xy * w,
            xx: &self.xx * w,
            zy: &self.zy * w,
            xz: &self.xz * w,
            zz: &self.zz * w,
            n: n_target,
        })
    }

    /// Summaries of the reparameterized design `X~ T` for a fixed-effect
    /// transform `T` (for example a block orthogonalizer).
    pub fn transformed(&self, t: &DMatrix<f64>) -> Result<SuffStats> {
        if t.nrows() != self.fixed_len() {
            return Err(VcmmError::DimensionMismatch {
                field: "transform",
                expected: self.fixed_len(),
                found: t.nrows(),
            });
        }
        let tt = t.transpose();
        let mut xx = &tt * &self.xx * t;
        crate::model::symmetrize_in_place(&mut xx);
        Ok(SuffStats {
            yy: self.yy,
            xy: &tt * &self.xy,
            xx,
            zy: self.zy.clone(),
            xz: &tt * &self.xz,
            zz: self.zz.clone(),
            n: self.n,
        })
    }
}

impl std::ops::Add for &SuffStats {
    type Output = Result<SuffStats>;

    fn add(self, rhs: &SuffStats) -> Result<SuffStats> {
        let mut out = self.clone();
        out.merge(rhs)?;
        Ok(out)
    }
}

/// Single pass over the rows of one partition. `C` and `H` are accumulated
/// on their upper triangles and mirrored, so they are exactly symmetric.
/// Streams the expanded rows of a partition: `(y, sparse x-tilde, sparse z)`.
fn visit_rows<F>(part: &Partition, basis: &TensorSplineBasis, mut visit: F) -> Result<()>
where
    F: FnMut(f64, &[(usize, f64)], &[(usize, f64)]),
{
    let n = part.n_rows();
    let p = part.x.ncols();
    let q = part.z.ncols();
    for (field, rows) in [("x rows", part.x.nrows()), ("h rows", part.h.nrows()), ("z rows", part.z.nrows())] {
        if rows != n {
            return Err(VcmmError::DimensionMismatch { field, expected: n, found: rows });
        }
    }
    if part.h.ncols() != basis.n_index() {
        return Err(VcmmError::DimensionMismatch {
            field: "h columns",
            expected: basis.n_index(),
            found: part.h.ncols(),
        });
    }

    let mut x_row = vec![0.0; p];
    let mut h_row = vec![0.0; basis.n_index()];
    let mut z_nz: Vec<(usize, f64)> = Vec::with_capacity(q);
    for r in 0..n {
        let y = part.y[r];
        if !y.is_finite() {
            return Err(VcmmError::NonFinite("y"));
        }
        x_row.iter_mut().enumerate().for_each(|(j, v)| *v = part.x[(r, j)]);
        h_row.iter_mut().enumerate().for_each(|(j, v)| *v = part.h[(r, j)]);
        if x_row.iter().any(|v| !v.is_finite()) {
            return Err(VcmmError::NonFinite("x"));
        }
        let xt = expand_row_sparse(basis, &x_row, &h_row).map_err(|e| match e {
            VcmmError::IndexOutOfDomain { margin, value, .. } => VcmmError::IndexOutOfDomain { row: r, margin, value },
            other => other,
        })?;
        z_nz.clear();
        for j in 0..q {
            let v = part.z[(r, j)];
            if !v.is_finite() {
                return Err(VcmmError::NonFinite("z"));
            }
            if v != 0.0 {
                z_nz.push((j, v));
            }
        }
        visit(y, &xt, &z_nz);
    }
    Ok(())
}

pub fn compute_local(part: &Partition, basis: &TensorSplineBasis) -> Result<SuffStats> {
    let f = (part.x.ncols() + 1) * basis.len();
    let q = part.z.ncols();
    let mut yy = Compensated::default();
    let mut xy = vec![Compensated::default(); f];
    let mut zy = vec![Compensated::default(); q];
    let mut xx = DMatrix::<f64>::zeros(f, f);
    let mut xz = DMatrix::<f64>::zeros(f, q);
    let mut zz = DMatrix::<f64>::zeros(q, q);

    visit_rows(part, basis, |y, xt, z_nz| {
        yy.add(y * y);
        for &(i, v) in xt {
            xy[i].add(y * v);
        }
        for &(j, v) in z_nz {
            zy[j].add(y * v);
        }
        // entries of xt are sorted by column, so (a <= b) covers the upper triangle
        for (ai, &(i, vi)) in xt.iter().enumerate() {
            for &(j, vj) in &xt[ai..] {
                xx[(i, j)] += vi * vj;
            }
            for &(j, vj) in z_nz {
                xz[(i, j)] += vi * vj;
            }
        }
        for (ai, &(i, vi)) in z_nz.iter().enumerate() {
            for &(j, vj) in &z_nz[ai..] {
                zz[(i, j)] += vi * vj;
            }
        }
    })?;
    mirror_upper(&mut xx);
    mirror_upper(&mut zz);

    Ok(SuffStats {
        yy: yy.value(),
        xy: DVector::from_iterator(f, xy.iter().map(Compensated::value)),
        xx,
        zy: DVector::from_iterator(q, zy.iter().map(Compensated::value)),
        xz,
        zz,
        n: part.n_rows() as u64,
    })
}

/// [`compute_local`] for every partition, in order.
pub fn compute_all(partitions: &[Partition], basis: &TensorSplineBasis) -> Result<Vec<SuffStats>> {
    partitions.iter().map(|p| compute_local(p, basis)).collect()
}

fn check_theta(part: &Partition, basis: &TensorSplineBasis, theta: &ModelParams) -> Result<()> {
    let f = (part.x.ncols() + 1) * basis.len();
    if theta.beta.len() != f {
        return Err(VcmmError::DimensionMismatch { field: "beta", expected: f, found: theta.beta.len() });
    }
    if theta.alpha.len() != part.z.ncols() {
        return Err(VcmmError::DimensionMismatch {
            field: "alpha",
            expected: part.z.ncols(),
            found: theta.alpha.len(),
        });
    }
    Ok(())
}

/// Unpenalized node score computed by one pass over the raw rows, without
/// forming any Gram matrix. Agrees with [`gradient`] on [`compute_local`].
pub fn local_score(part: &Partition, basis: &TensorSplineBasis, theta: &ModelParams) -> Result<ScoreVector> {
    check_theta(part, basis, theta)?;
    let s2 = theta.sigma2_eps();
    let mut g_beta = DVector::zeros(theta.beta.len());
    let mut g_alpha = DVector::zeros(theta.alpha.len());
    visit_rows(part, basis, |y, xt, z_nz| {
        let fitted: f64 = xt.iter().map(|&(i, v)| v * theta.beta[i]).sum::<f64>()
            + z_nz.iter().map(|&(j, v)| v * theta.alpha[j]).sum::<f64>();
        let r = fitted - y;
        for &(i, v) in xt {
            g_beta[i] += v * r;
        }
        for &(j, v) in z_nz {
            g_alpha[j] += v * r;
        }
    })?;
    Ok(ScoreVector { g_beta: g_beta / s2, g_alpha: g_alpha / s2, penalized: false })
}

/// Residual sum of squares over the raw rows.
pub fn local_residual_ss(part: &Partition, basis: &TensorSplineBasis, theta: &ModelParams) -> Result<f64> {
    check_theta(part, basis, theta)?;
    let mut rss = Compensated::default();
    visit_rows(part, basis, |y, xt, z_nz| {
        let fitted: f64 = xt.iter().map(|&(i, v)| v * theta.beta[i]).sum::<f64>()
            + z_nz.iter().map(|&(j, v)| v * theta.alpha[j]).sum::<f64>();
        rss.add((y - fitted) * (y - fitted));
    })?;
    Ok(rss.value())
}

fn mirror_upper(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// Componentwise sum, in the order given.
pub fn aggregate(stats: &[SuffStats]) -> Result<SuffStats> {
    let first =
        stats.first().ok_or_else(|| VcmmError::InvalidSpec("cannot aggregate an empty list of summaries".into()))?;
    let mut out = first.clone();
    for s in &stats[1..] {
        out.merge(s)?;
    }
    Ok(out)
}

fn check_params(theta: &ModelParams, agg: &SuffStats) -> Result<()> {
    if theta.beta.len() != agg.fixed_len() {
        return Err(VcmmError::DimensionMismatch { field: "beta", expected: agg.fixed_len(), found: theta.beta.len() });
    }
    if theta.alpha.len() != agg.n_random() {
        return Err(VcmmError::DimensionMismatch {
            field: "alpha",
            expected: agg.n_random(),
            found: theta.alpha.len(),
        });
    }
    theta.variance.validate(agg.n_random())
}

/// Negative penalized joint log-likelihood, up to additive constants:
///
/// `RSS / (2 s2) + (N / 2) log s2 + beta^T P beta / 2 + alpha^T Sigma^{-1} alpha / 2 + log det Sigma / 2`.
pub fn joint_objective(theta: &ModelParams, agg: &SuffStats) -> Result<f64> {
    check_params(theta, agg)?;
    let s2 = theta.sigma2_eps();
    let q = agg.n_random();
    let rss = agg.residual_ss(&theta.beta, &theta.alpha);
    let sigma_inv = theta.variance.sigma_alpha.inverse(q)?;
    let beta_pen = theta.beta.dot(&(&theta.penalty.matrix * &theta.beta));
    let alpha_pen = theta.alpha.dot(&(&sigma_inv * &theta.alpha));
    let logdet = if q == 0 { 0.0 } else { theta.variance.sigma_alpha.logdet(q)? };
    Ok(rss / (2.0 * s2) + 0.5 * agg.n as f64 * s2.ln() + 0.5 * beta_pen + 0.5 * alpha_pen + 0.5 * logdet)
}

/// Gradient of the joint objective with respect to `(beta, alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub g_beta: DVector<f64>,
    pub g_alpha: DVector<f64>,
    /// Whether the prior terms `P beta` and `Sigma^{-1} alpha` are included.
    pub penalized: bool,
}

impl ScoreVector {
    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.g_beta, &self.g_alpha)
    }

    pub fn from_stacked(v: &DVector<f64>, fixed_len: usize, penalized: bool) -> Self {
        Self {
            g_beta: v.rows(0, fixed_len).into_owned(),
            g_alpha: v.rows(fixed_len, v.len() - fixed_len).into_owned(),
            penalized,
        }
    }

    pub fn norm_inf(&self) -> f64 {
        self.g_beta.amax().max(self.g_alpha.amax())
    }

    /// Sum of node-local (unpenalized) scores.
    pub fn sum(scores: &[ScoreVector]) -> Result<ScoreVector> {
        let first =
            scores.first().ok_or_else(|| VcmmError::InvalidSpec("cannot sum an empty list of scores".into()))?;
        let mut out = first.clone();
        for s in &scores[1..] {
            if s.penalized || s.g_beta.len() != out.g_beta.len() || s.g_alpha.len() != out.g_alpha.len() {
                return Err(VcmmError::InvalidSpec("scores must be unpenalized and equally sized".into()));
            }
            out.g_beta += &s.g_beta;
            out.g_alpha += &s.g_alpha;
        }
        Ok(out)
    }

    /// Adds the prior terms exactly once.
    pub fn add_prior(mut self, theta: &ModelParams) -> Result<ScoreVector> {
        if self.penalized {
            return Err(VcmmError::InvalidSpec("prior terms already included".into()));
        }
        self.g_beta += &theta.penalty.matrix * &theta.beta;
        self.g_alpha += theta.variance.sigma_alpha.inverse(theta.alpha.len())? * &theta.alpha;
        self.penalized = true;
        Ok(self)
    }
}

/// `g_beta = (C beta + B alpha - b) / s2 [+ P beta]`,
/// `g_alpha = (B^T beta + H alpha - d) / s2 [+ Sigma^{-1} alpha]`.
///
/// Node-local scores leave out the prior terms; the aggregator adds them once
/// through [`ScoreVector::add_prior`].
pub fn gradient(theta: &ModelParams, agg: &SuffStats, include_penalty: bool) -> Result<ScoreVector> {
    check_params(theta, agg)?;
    let s2 = theta.sigma2_eps();
    let g_beta = (&agg.xx * &theta.beta + &agg.xz * &theta.alpha - &agg.xy) / s2;
    let g_alpha = (agg.xz.tr_mul(&theta.beta) + &agg.zz * &theta.alpha - &agg.zy) / s2;
    let score = ScoreVector { g_beta, g_alpha, penalized: false };
    if include_penalty {
        score.add_prior(theta)
    } else {
        Ok(score)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelDims, Penalty, PenaltySpec, RandomEffectCov, VarianceComponents};
    use crate::spline::{expand_design, UnivariateBasis};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_partition(rng: &mut ChaCha8Rng, id: u32, n: usize, p: usize, q: usize) -> Partition {
        Partition {
            id,
            y: DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0)),
            x: DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0)),
            h: DMatrix::from_fn(n, 1, |_, _| rng.random()),
            z: DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn basis(q: usize) -> TensorSplineBasis {
        TensorSplineBasis::univariate(UnivariateBasis::uniform(q, 3).unwrap())
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn empty_partition_gives_zero_stats() {
        let b = basis(5);
        let s = compute_local(&Partition::empty(0, 1, 1, 2), &b).unwrap();
        assert_eq!(s, SuffStats::zeros(10, 2));
    }

    #[test]
    fn single_row_definition() {
        // degree-0 basis with one function makes x~ = e_1 for p = 0
        let b = TensorSplineBasis::univariate(UnivariateBasis::new(0, vec![]).unwrap());
        let part = Partition {
            id: 0,
            y: DVector::from_element(1, 2.0),
            x: DMatrix::zeros(1, 0),
            h: DMatrix::from_element(1, 1, 0.3),
            z: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        };
        let s = compute_local(&part, &b).unwrap();
        assert_eq!(s.yy, 4.0);
        assert_eq!(s.xy.as_slice(), &[2.0]);
        assert_eq!(s.xx.as_slice(), &[1.0]);
        assert_eq!(s.zy.as_slice(), &[2.0, 0.0]);
        assert_eq!(s.xz, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(s.zz, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn matches_dense_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = basis(6);
        let part = random_partition(&mut rng, 0, 20, 2, 3);
        let s = compute_local(&part, &b).unwrap();
        let xt = expand_design(&part.x, &part.h, &b).unwrap();
        assert_relative_eq!(s.yy, part.y.dot(&part.y), max_relative = 1e-12);
        let xty = DMatrix::from_column_slice(18, 1, (xt.transpose() * &part.y).as_slice());
        assert!(rel_err(&DMatrix::from_column_slice(18, 1, s.xy.as_slice()), &xty) <= 1e-12);
        assert!(rel_err(&s.xx, &(xt.transpose() * &xt)) <= 1e-12);
        assert!(rel_err(&s.xz, &(xt.transpose() * &part.z)) <= 1e-12);
        assert!(rel_err(&s.zz, &(part.z.transpose() * &part.z)) <= 1e-12);
        let zty = part.z.transpose() * &part.y;
        assert!((&s.zy - zty).amax() <= 1e-12 * s.zy.amax());
    }

    #[test]
    fn aggregation_equals_unsplit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = basis(7);
        let whole = random_partition(&mut rng, 0, 103, 1, 4);
        let full = compute_local(&whole, &b).unwrap();
        let parts: Vec<_> = [(0, 30), (30, 20), (50, 40), (90, 13)]
            .iter()
            .map(|&(s, l)| compute_local(&whole.slice_rows(s, l), &b).unwrap())
            .collect();
        let agg = aggregate(&parts).unwrap();
        assert_eq!(agg.n, 103);
        assert!(rel_err(&agg.xx, &full.xx) <= 1e-12);
        assert!(rel_err(&agg.xz, &full.xz) <= 1e-12);
        assert!(rel_err(&agg.zz, &full.zz) <= 1e-12);
        assert_relative_eq!(agg.yy, full.yy, max_relative = 1e-12);

        let single = aggregate(std::slice::from_ref(&parts[0])).unwrap();
        assert_eq!(single, parts[0]);
        let ab = aggregate(&parts[..2]).unwrap();
        let ba = aggregate(&[parts[1].clone(), parts[0].clone()]).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn aggregate_rejects_mismatched_shapes() {
        let a = SuffStats::zeros(4, 2);
        let b = SuffStats::zeros(4, 3);
        assert!(aggregate(&[a, b]).is_err());
    }

    #[test]
    fn summary_size_is_independent_of_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = basis(5);
        let sizes: Vec<_> = [1usize, 10, 10_000]
            .iter()
            .map(|&n| {
                let s = compute_local(&random_partition(&mut rng, 0, n, 2, 3), &b).unwrap();
                (s.xy.len(), s.xx.shape(), s.zy.len(), s.xz.shape(), s.zz.shape())
            })
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(SuffStats::scalar_count(12, 5), 171);
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = compute_local(&random_partition(&mut rng, 0, 40, 1, 5), &basis(6)).unwrap();
        let g = s.gram();
        for _ in 0..1000 {
            let v = DVector::from_fn(g.nrows(), |_, _| rng.random_range(-1.0..1.0));
            assert!(v.dot(&(&g * &v)) >= -1e-10);
        }
    }

    fn params(rng: &mut ChaCha8Rng, dims: &ModelDims, s2: f64) -> ModelParams {
        let pen = Penalty::new(PenaltySpec::second_difference(0.8), dims).unwrap();
        ModelParams::new(
            DVector::from_fn(dims.fixed_len(), |_, _| rng.random_range(-1.0..1.0)),
            DVector::from_fn(dims.n_random, |_, _| rng.random_range(-1.0..1.0)),
            VarianceComponents::new(s2, RandomEffectCov::block_isotropic(&[(1, 0.7), (2, 1.3)])),
            pen,
        )
        .unwrap()
    }

    #[test]
    fn objective_matches_raw_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = basis(5);
        let part = random_partition(&mut rng, 0, 50, 1, 3);
        let s = compute_local(&part, &b).unwrap();
        let dims = ModelDims::new(1, 5, 3, 1, 1, 50).unwrap();
        let theta = params(&mut rng, &dims, 0.6);
        let xt = expand_design(&part.x, &part.h, &b).unwrap();
        let r = &part.y - &xt * &theta.beta - &part.z * &theta.alpha;
        let sig = theta.variance.sigma_alpha.matrix(3);
        let raw = r.norm_squared() / (2.0 * 0.6)
            + 25.0 * 0.6f64.ln()
            + 0.5 * theta.beta.dot(&(&theta.penalty.matrix * &theta.beta))
            + 0.5 * theta.alpha.dot(&(sig.clone().try_inverse().unwrap() * &theta.alpha))
            + 0.5 * sig.determinant().ln();
        assert_relative_eq!(joint_objective(&theta, &s).unwrap(), raw, max_relative = 1e-12);
    }

    #[test]
    fn objective_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let part = random_partition(&mut rng, 0, 30, 1, 2);
        let s = compute_local(&part, &basis(4)).unwrap();
        let dims = ModelDims::new(1, 4, 2, 1, 1, 30).unwrap();
        let theta = ModelParams::zeros(
            &dims,
            VarianceComponents::new(0.5, RandomEffectCov::isotropic(2.0)),
            Penalty::zero(&dims),
        )
        .unwrap();
        let expected = s.yy / 1.0 + 15.0 * 0.5f64.ln() + 0.5 * 2.0 * 2.0f64.ln();
        assert_relative_eq!(joint_objective(&theta, &s).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn nonpositive_variance_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = compute_local(&random_partition(&mut rng, 0, 5, 0, 1), &basis(4)).unwrap();
        let dims = ModelDims::new(0, 4, 1, 1, 1, 5).unwrap();
        let mut theta = ModelParams::zeros(
            &dims,
            VarianceComponents::new(1.0, RandomEffectCov::isotropic(1.0)),
            Penalty::zero(&dims),
        )
        .unwrap();
        theta.variance.sigma2_eps = 0.0;
        assert!(matches!(joint_objective(&theta, &s), Err(VcmmError::NonPositiveVariance(_))));
        assert!(gradient(&theta, &s, true).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = basis(5);
        let s = compute_local(&random_partition(&mut rng, 0, 60, 1, 3), &b).unwrap();
        let dims = ModelDims::new(1, 5, 3, 1, 1, 60).unwrap();
        for _ in 0..5 {
            let theta = params(&mut rng, &dims, 0.9);
            let g = gradient(&theta, &s, true).unwrap().stacked();
            let t0 = theta.theta();
            for i in 0..t0.len() {
                let h = 1e-6;
                let mut tp = t0.clone();
                tp[i] += h;
                let mut tm = t0.clone();
                tm[i] -= h;
                let fd = (joint_objective(&theta.with_theta(&tp), &s).unwrap()
                    - joint_objective(&theta.with_theta(&tm), &s).unwrap())
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "coord {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn raw_scores_match_summary_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = basis(6);
        let part = random_partition(&mut rng, 0, 80, 2, 3);
        let s = compute_local(&part, &b).unwrap();
        let dims = ModelDims::new(2, 6, 3, 1, 1, 80).unwrap();
        let theta = params(&mut rng, &dims, 0.7);
        let raw = local_score(&part, &b, &theta).unwrap().stacked();
        let summ = gradient(&theta, &s, false).unwrap().stacked();
        for i in 0..raw.len() {
            assert_relative_eq!(raw[i], summ[i], epsilon = 1e-9, max_relative = 1e-9);
        }
        let rss = local_residual_ss(&part, &b, &theta).unwrap();
        assert_relative_eq!(rss, s.residual_ss(&theta.beta, &theta.alpha), max_relative = 1e-9);
    }

    #[test]
    fn node_scores_sum_to_global_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let b = basis(6);
        let locals: Vec<_> =
            (0..4).map(|k| compute_local(&random_partition(&mut rng, k, 25 + k as usize, 1, 3), &b).unwrap()).collect();
        let agg = aggregate(&locals).unwrap();
        let dims = ModelDims::new(1, 6, 3, 1, 4, agg.n as usize).unwrap();
        let theta = params(&mut rng, &dims, 0.4);
        let node: Vec<_> = locals.iter().map(|s| gradient(&theta, s, false).unwrap()).collect();
        let summed = ScoreVector::sum(&node).unwrap().add_prior(&theta).unwrap();
        let global = gradient(&theta, &agg, true).unwrap();
        let diff = (summed.stacked() - global.stacked()).amax();
        assert!(diff <= 1e-12 * global.stacked().amax().max(1.0), "{diff}");
        assert!(summed.clone().add_prior(&theta).is_err());
    }

    #[test]
    fn objective_is_convex_in_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = compute_local(&random_partition(&mut rng, 0, 40, 1, 3), &basis(5)).unwrap();
        let dims = ModelDims::new(1, 5, 3, 1, 1, 40).unwrap();
        let t1 = params(&mut rng, &dims, 0.7);
        let t2 = params(&mut rng, &dims, 0.7);
        let mid = t1.with_theta(&((t1.theta() + t2.theta()) / 2.0));
        let f = |t: &ModelParams| joint_objective(t, &s).unwrap();
        assert!(f(&mid) < 0.5 * (f(&t1) + f(&t2)));
    }

    #[test]
    fn transformed_stats_match_transformed_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = basis(5);
        let part = random_partition(&mut rng, 0, 30, 0, 2);
        let s = compute_local(&part, &b).unwrap();
        let t = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let st = s.transformed(&t).unwrap();
        let xt = expand_design(&part.x, &part.h, &b).unwrap() * &t;
        assert!(rel_err(&st.xx, &(xt.transpose() * &xt)) <= 1e-12);
        assert!(rel_err(&st.xz, &(xt.transpose() * &part.z)) <= 1e-12);
    }
}
