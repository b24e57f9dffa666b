//! Synthetic scenarios, the pooled raw-data oracle, smoothing selection and
//! evaluation metrics.
//!
//! Every scenario draws `t ~ U(0,1)^M` and `X ~ U(0,1)` and sets
//! `y = beta_0 + beta_1(t) X + sum_f alpha_f[level_f] + eps` with
//! `beta_0 = 2`. Example 4 uses `beta_1(t1, t2) = sin(2 pi (t1 + t2))`; the
//! others `beta_1(t) = sin(2 pi t)`.
//!
//! | example | N      | basis   | random effects                                  |
//! |--------:|-------:|---------|-------------------------------------------------|
//! | 1       | 1 000  | 19      | one factor, 20 levels                           |
//! | 2       | 4 000  | 19      | one factor, 200 levels, adjacent correlation 0.1|
//! | 3       | 10 000 | 19      | two factors, 10 levels each                     |
//! | 4       | 10 000 | 12 x 12 | one factor, 20 levels                           |

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::estimator::{
    block_fit, fisher_info, gibbs_fit, onestep_fit_raw, posterior_blocks, residual_variance, svd_fit, FitConfig,
    FitResult, Method, VarianceUpdate,
};
use crate::model::{ModelDims, ModelParams, Partition, Penalty, PenaltySpec, RandomEffectCov, VarianceComponents};
use crate::spline::{coefficient_function, expand_design, BasisSpec, TensorSplineBasis};
use crate::suffstats::{aggregate, compute_all, compute_local, SuffStats};

pub const BETA0: f64 = 2.0;
pub const DEFAULT_NOISE_SD: f64 = 0.25;
pub const DEFAULT_SIGMA_ALPHA: f64 = 0.5;
pub const CV_FOLDS: usize = 5;
pub const CV_GRID_LEN: usize = 20;
/// Relative truncation threshold for `H_aug` in the Example 2 comparison.
pub const EXAMPLE2_TRUNCATION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub example: u8,
    /// Total rows, training and test together.
    pub n: usize,
    pub seed: u64,
    /// Number of training partitions.
    pub k: usize,
    /// Levels of each grouping factor; `q` is their sum.
    pub group_levels: Vec<usize>,
    pub noise_sd: f64,
    pub sigma_alpha: f64,
    /// Correlation of adjacent random effects within a factor.
    pub correlation: f64,
    /// Univariate basis sizes, one per index dimension.
    pub basis_sizes: Vec<usize>,
    pub test_fraction: f64,
}

impl ScenarioSpec {
    pub fn example(id: u8) -> Result<Self> {
        let base = ScenarioSpec {
            example: id,
            n: 1000,
            seed: 1,
            k: 4,
            group_levels: vec![20],
            noise_sd: DEFAULT_NOISE_SD,
            sigma_alpha: DEFAULT_SIGMA_ALPHA,
            correlation: 0.0,
            basis_sizes: vec![19],
            test_fraction: 0.2,
        };
        let spec = match id {
            1 => base,
            2 => ScenarioSpec { n: 4000, group_levels: vec![200], correlation: 0.1, ..base },
            3 => ScenarioSpec { n: 10_000, k: 8, group_levels: vec![10, 10], ..base },
            4 => ScenarioSpec { n: 10_000, k: 8, basis_sizes: vec![12, 12], ..base },
            other => return Err(VcmmError::InvalidSpec(format!("example must be 1, 2, 3 or 4, got {other}"))),
        };
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    /// Spreads `q` levels evenly over the existing grouping factors.
    pub fn with_q(mut self, q: usize) -> Self {
        let f = self.group_levels.len().max(1);
        self.group_levels = (0..f).map(|i| q / f + usize::from(i < q % f)).collect();
        self
    }

    pub fn n_index(&self) -> usize {
        self.basis_sizes.len()
    }

    pub fn n_random(&self) -> usize {
        self.group_levels.iter().sum()
    }

    pub fn n_test(&self) -> usize {
        (self.n as f64 * self.test_fraction).round() as usize
    }

    pub fn n_train(&self) -> usize {
        self.n - self.n_test()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(VcmmError::InvalidSpec(msg));
        if !(1..=4).contains(&self.example) {
            return bad(format!("example must be 1, 2, 3 or 4, got {}", self.example));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if self.n_train() < self.k {
            return bad(format!("{} training rows cannot fill {} partitions", self.n_train(), self.k));
        }
        if !(self.noise_sd >= 0.0) || !(self.sigma_alpha > 0.0) {
            return bad("noise sd must be nonnegative and sigma_alpha positive".into());
        }
        if !(self.correlation.abs() < 0.5) {
            return bad(format!("adjacent correlation must lie in (-0.5, 0.5), got {}", self.correlation));
        }
        if self.group_levels.is_empty() || self.group_levels.contains(&0) {
            return bad("every grouping factor needs at least one level".into());
        }
        let expected_m = if self.example == 4 { 2 } else { 1 };
        if self.basis_sizes.len() != expected_m {
            return bad(format!("example {} needs {expected_m} basis sizes", self.example));
        }
        if self.basis_sizes.iter().any(|&b| b < 4) {
            return bad("cubic bases need at least 4 functions per margin".into());
        }
        Ok(())
    }

    /// Smoothing penalty used for the scenario fits: second differences along
    /// each index margin, which leave constant and linear coefficient
    /// functions unpenalized.
    pub fn penalty_spec(&self, lambda: f64) -> PenaltySpec {
        PenaltySpec::tensor_second_difference(lambda, &self.basis_sizes)
    }

    pub fn basis_spec(&self) -> BasisSpec {
        BasisSpec::cubic(&self.basis_sizes)
    }

    /// Covariance of the random effects within one factor.
    pub fn factor_covariance(&self, levels: usize) -> DMatrix<f64> {
        let v = self.sigma_alpha * self.sigma_alpha;
        DMatrix::from_fn(levels, levels, |i, j| match i.abs_diff(j) {
            0 => v,
            1 => self.correlation * v,
            _ => 0.0,
        })
    }

    /// True random-effect covariance over all `q` effects.
    pub fn true_covariance(&self) -> RandomEffectCov {
        let v = self.sigma_alpha * self.sigma_alpha;
        if self.correlation != 0.0 {
            let q = self.n_random();
            let mut m = DMatrix::zeros(q, q);
            let mut at = 0;
            for &l in &self.group_levels {
                m.view_mut((at, at), (l, l)).copy_from(&self.factor_covariance(l));
                at += l;
            }
            RandomEffectCov::full(m, 0.0)
        } else if self.group_levels.len() == 1 {
            RandomEffectCov::isotropic(v)
        } else {
            RandomEffectCov::block_isotropic(&self.group_levels.iter().map(|&l| (l, v)).collect::<Vec<_>>())
        }
    }

    /// Structure used when fitting: one variance per grouping factor.
    /// Adjacent correlation is not modelled.
    pub fn working_covariance(&self, sigma2: f64) -> RandomEffectCov {
        if self.group_levels.len() == 1 {
            RandomEffectCov::isotropic(sigma2)
        } else {
            RandomEffectCov::block_isotropic(&self.group_levels.iter().map(|&l| (l, sigma2)).collect::<Vec<_>>())
        }
    }

    /// Draws one vector of random effects.
    pub fn sample_alpha(&self, rng: &mut impl Rng) -> DVector<f64> {
        let mut alpha = Vec::with_capacity(self.n_random());
        for &l in &self.group_levels {
            let noise = DVector::from_fn(l, |_, _| StandardNormal.sample(rng));
            if self.correlation == 0.0 {
                alpha.extend(noise.iter().map(|z: &f64| z * self.sigma_alpha));
            } else {
                let chol = self.factor_covariance(l).cholesky().expect("tridiagonal covariance with |rho| < 1/2 is PD");
                alpha.extend((chol.l() * noise).iter());
            }
        }
        DVector::from_vec(alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientShape {
    /// `sin(2 pi t)`.
    Sine,
    /// `sin(2 pi (t1 + t2))`.
    SineSum,
}

/// Ground truth of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub example: u8,
    pub beta0: f64,
    pub shape: CoefficientShape,
    pub alpha: Vec<f64>,
    pub sigma2_eps: f64,
    pub sigma_alpha: RandomEffectCov,
}

impl Truth {
    /// `beta_k(h)` for `k = 0` (intercept) and `k = 1`.
    pub fn coefficient(&self, k: usize, h: &[f64]) -> f64 {
        match k {
            0 => self.beta0,
            _ => match self.shape {
                CoefficientShape::Sine => (2.0 * PI * h[0]).sin(),
                CoefficientShape::SineSum => (2.0 * PI * (h[0] + h[1])).sin(),
            },
        }
    }

    /// Variances of the random-effect structure in fitting order.
    pub fn sigma_alpha_variances(&self) -> Vec<f64> {
        match &self.sigma_alpha {
            RandomEffectCov::Full { matrix, .. } => vec![matrix.diagonal().mean()],
            other => other.variances(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: ScenarioSpec,
    pub partitions: Vec<Partition>,
    pub test: Partition,
    pub truth: Truth,
    pub dims: ModelDims,
    pub basis_spec: BasisSpec,
}

impl Dataset {
    pub fn basis(&self) -> Result<TensorSplineBasis> {
        self.basis_spec.build()
    }

    pub fn pooled(&self) -> Result<Partition> {
        Partition::concat(&self.partitions)
    }
}

/// Draws a dataset. Rows are independent, so the last rows form the test
/// split and the rest are cut into `k` contiguous partitions of near-equal
/// size.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, m, q) = (spec.n, spec.n_index(), spec.n_random());
    let alpha = spec.sample_alpha(&mut rng);

    let h = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
    let mut z = DMatrix::zeros(n, q);
    let mut offset = 0;
    for &levels in &spec.group_levels {
        let mut labels: Vec<usize> = (0..n).map(|i| i % levels).collect();
        labels.shuffle(&mut rng);
        for (i, &l) in labels.iter().enumerate() {
            z[(i, offset + l)] = 1.0;
        }
        offset += levels;
    }
    let truth = Truth {
        example: spec.example,
        beta0: BETA0,
        shape: if m == 2 { CoefficientShape::SineSum } else { CoefficientShape::Sine },
        alpha: alpha.iter().copied().collect(),
        sigma2_eps: spec.noise_sd * spec.noise_sd,
        sigma_alpha: spec.true_covariance(),
    };
    let y = DVector::from_fn(n, |i, _| {
        let hi: Vec<f64> = h.row(i).iter().copied().collect();
        let eps: f64 = StandardNormal.sample(&mut rng);
        truth.coefficient(0, &hi) + truth.coefficient(1, &hi) * x[(i, 0)] + (z.row(i) * &alpha)[0] + spec.noise_sd * eps
    });
    let all = Partition { id: 0, y, x, h, z };

    let n_train = spec.n_train();
    let mut partitions = Vec::with_capacity(spec.k);
    let mut start = 0;
    for id in 0..spec.k {
        let len = n_train / spec.k + usize::from(id < n_train % spec.k);
        let mut part = all.slice_rows(start, len);
        part.id = id as u32;
        partitions.push(part);
        start += len;
    }
    let mut test = all.slice_rows(n_train, spec.n_test());
    test.id = u32::MAX;
    let basis_spec = spec.basis_spec();
    let basis = basis_spec.build()?;
    let dims = ModelDims::new(1, basis.len(), q, m, spec.k, n_train)?;
    Ok(Dataset { spec: spec.clone(), partitions, test, truth, dims, basis_spec })
}

/// Symmetric PSD square root via the eigendecomposition, with negative
/// rounding noise clipped to zero.
fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = crate::model::symmetrize(a).symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Posterior mode from pooled raw rows: least squares on
/// `[W / s; D^{1/2}] theta ~ [y / s; 0]` with `W = [X~ Z]` and
/// `D = blockdiag(P, Sigma^-1)`, solved by Householder QR. No summary
/// statistic is formed.
pub fn direct_oracle(
    partitions: &[Partition],
    basis: &TensorSplineBasis,
    template: &ModelParams,
) -> Result<ModelParams> {
    let pooled = Partition::concat(partitions)?;
    let design = expand_design(&pooled.x, &pooled.h, basis)?;
    let (n, f) = (design.nrows(), design.ncols());
    let q = pooled.z.ncols();
    if template.beta.len() != f || template.alpha.len() != q {
        return Err(VcmmError::DimensionMismatch { field: "template", expected: f + q, found: template.theta().len() });
    }
    let s = template.sigma2_eps().sqrt();
    let d = f + q;
    let mut a = DMatrix::zeros(n + d, d);
    a.view_mut((0, 0), (n, f)).copy_from(&(design / s));
    a.view_mut((0, f), (n, q)).copy_from(&(&pooled.z / s));
    a.view_mut((n, 0), (f, f)).copy_from(&psd_sqrt(&template.penalty.matrix));
    a.view_mut((n + f, f), (q, q)).copy_from(&psd_sqrt(&template.variance.sigma_alpha.inverse(q)?));
    let mut rhs = DVector::zeros(n + d);
    rhs.rows_mut(0, n).copy_from(&(&pooled.y / s));

    let qr = a.qr();
    let r = qr.r();
    let qty = qr.q().tr_mul(&rhs);
    let diag_max = r.diagonal().amax();
    if r.diagonal().iter().any(|v| v.abs() <= 1e-14 * diag_max) {
        return Err(VcmmError::Singular { what: "pooled augmented design", min_eigenvalue: r.diagonal().amin() });
    }
    let theta = r
        .solve_upper_triangular(&qty)
        .ok_or(VcmmError::Singular { what: "pooled augmented design", min_eigenvalue: 0.0 })?;
    Ok(template.with_theta(&theta))
}

/// The conventional estimator: [`direct_oracle`] on pooled rows alternated
/// with variance updates computed from raw residuals.
pub fn direct_fit(
    partitions: &[Partition],
    basis: &TensorSplineBasis,
    init: &ModelParams,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let pooled = Partition::concat(partitions)?;
    let design = expand_design(&pooled.x, &pooled.h, basis)?;
    let n = pooled.n_rows() as u64;
    let yy = pooled.y.norm_squared();
    let mut params = init.clone();
    let mut iterations = 0;
    let mut converged = false;
    let max_outer = cfg.max_iter.min(10_000);
    for it in 1..=max_outer {
        iterations = it;
        let next = direct_oracle(std::slice::from_ref(&pooled), basis, &params)?;
        let step = (next.theta() - params.theta()).amax();
        params = next;
        if cfg.variance_update == VarianceUpdate::Fixed {
            converged = true;
            break;
        }
        let resid = &pooled.y - &design * &params.beta - &pooled.z * &params.alpha;
        let s2 = residual_variance(resid.norm_squared(), yy, n)?;
        let var_step = (s2 - params.sigma2_eps()).abs();
        params.variance = VarianceComponents::new(s2, params.variance.sigma_alpha.project(&params.alpha));
        if step <= cfg.tol_param && var_step <= cfg.tol_param {
            converged = true;
            break;
        }
    }
    let agg = compute_local(&pooled, basis)?;
    let info = fisher_info(&agg, &params.variance, &params.penalty).ok();
    Ok(FitResult {
        params,
        method: Method::Direct,
        iterations,
        converged,
        objective_trace: Vec::new(),
        gradient_norm: f64::NAN,
        info_matrix: info,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// 20 log-spaced smoothing weights from `1e-4` to `1e4`.
pub fn lambda_grid() -> Vec<f64> {
    (0..CV_GRID_LEN).map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / (CV_GRID_LEN - 1) as f64)).collect()
}

/// Summaries of each cross-validation fold. Row `i` of every partition goes
/// to fold `i mod folds`, so the folds come from summaries alone.
pub fn fold_stats(partitions: &[Partition], basis: &TensorSplineBasis, folds: usize) -> Result<Vec<SuffStats>> {
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut parts = Vec::new();
        for p in partitions {
            let rows: Vec<usize> = (f..p.n_rows()).step_by(folds).collect();
            let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
            parts.push(Partition {
                id: p.id,
                y: DVector::from_fn(rows.len(), |i, _| p.y[rows[i]]),
                x: pick(&p.x),
                h: pick(&p.h),
                z: pick(&p.z),
            });
        }
        let stats = parts.iter().map(|p| compute_local(p, basis)).collect::<Result<Vec<_>>>()?;
        out.push(aggregate(&stats)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Held-out residual sum of squares per grid value.
    pub scores: Vec<f64>,
}

/// K-fold selection of the ridge weight at fixed variance components.
/// Each fold is fitted on the other folds' summed statistics and scored by
/// its own held-out residual sum of squares.
pub fn select_lambda(folds: &[SuffStats], template: &ModelParams, grid: &[f64]) -> Result<CvResult> {
    if folds.len() < 2 || grid.is_empty() {
        return Err(VcmmError::InvalidSpec("cross-validation needs two folds and a nonempty grid".into()));
    }
    let trains: Vec<SuffStats> = (0..folds.len())
        .map(|f| {
            let others: Vec<SuffStats> =
                folds.iter().enumerate().filter(|&(g, _)| g != f).map(|(_, s)| s.clone()).collect();
            aggregate(&others)
        })
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut params = template.clone();
        params.penalty = rescaled_penalty(&template.penalty, lambda)?;
        let mut total = 0.0;
        for (train, held) in trains.iter().zip(folds) {
            let post = posterior_blocks(&params, train)?;
            total += held.residual_ss(&post.mu_beta, &post.mu_alpha);
        }
        scores.push(total);
    }
    let best = scores.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).expect("nonempty grid");
    Ok(CvResult { lambda: grid[best], grid: grid.to_vec(), scores })
}

/// `P(lambda') = (lambda' / lambda) P(lambda)`: penalties are linear in
/// their weight.
fn rescaled_penalty(old: &Penalty, lambda: f64) -> Result<Penalty> {
    if old.spec.block_lambdas.is_some() || !(old.spec.lambda > 0.0) {
        return Err(VcmmError::InvalidSpec("cross-validation needs a single positive penalty weight".into()));
    }
    Ok(Penalty { spec: old.spec.with_lambda(lambda), matrix: &old.matrix * (lambda / old.spec.lambda) })
}

/// Penalty, starting values and smoothing weight shared by every method in
/// a replication.
#[derive(Debug, Clone)]
pub struct FitSetup {
    pub init: ModelParams,
    pub cv: CvResult,
}

/// Starting values and the cross-validated ridge weight. Variance
/// components for cross-validation come from a pilot fit at the middle of
/// the grid.
pub fn prepare(data: &Dataset, cfg: &FitConfig) -> Result<FitSetup> {
    let basis = data.basis()?;
    let stats = compute_all(&data.partitions, &basis)?;
    let agg = aggregate(&stats)?;
    let sum_y = agg.xy.rows(0, basis.len()).sum();
    let var_y = agg.yy / agg.n as f64 - (sum_y / agg.n as f64).powi(2);
    let start_var = VarianceComponents::new(0.5 * var_y.max(1e-6), data.spec.working_covariance(0.5 * var_y.max(1e-6)));
    let grid = lambda_grid();
    let mid = grid[grid.len() / 2];
    let penalty = Penalty::new(data.spec.penalty_spec(mid), &data.dims)?;
    let start = ModelParams::zeros(&data.dims, start_var, penalty)?;
    let pilot_cfg = FitConfig { tol_param: 1e-8, variance_update: VarianceUpdate::Iterate, ..cfg.clone() };
    let pilot = block_fit(&agg, &start, &pilot_cfg)?;

    let folds = fold_stats(&data.partitions, &basis, CV_FOLDS)?;
    let cv = select_lambda(&folds, &pilot.params, &grid)?;
    let init = ModelParams::zeros(
        &data.dims,
        pilot.params.variance,
        Penalty::new(data.spec.penalty_spec(cv.lambda), &data.dims)?,
    )?;
    Ok(FitSetup { init, cv })
}

/// Runs one method on the training partitions. The clock covers the fit
/// path only: summaries (where used) and the solve.
pub fn run_method(data: &Dataset, setup: &FitSetup, method: Method, cfg: &FitConfig) -> Result<FitResult> {
    let basis = data.basis()?;
    let cfg = FitConfig { method, ..cfg.clone() };
    let start = Instant::now();
    let mut fit = match method {
        Method::Direct => direct_fit(&data.partitions, &basis, &setup.init, &cfg)?,
        Method::Onestep => onestep_fit_raw(&data.partitions, &basis, &setup.init, &cfg)?,
        _ => {
            let stats = compute_all(&data.partitions, &basis)?;
            match method {
                Method::Ss => block_fit(&aggregate(&stats)?, &setup.init, &cfg)?,
                Method::Svd => svd_fit(&aggregate(&stats)?, &setup.init, &cfg)?,
                Method::Gibbs => gibbs_fit(&aggregate(&stats)?, &setup.init, &cfg)?,
                Method::Direct | Method::Onestep => unreachable!(),
            }
        }
    };
    fit.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(fit)
}

/// Evaluation points: 1000 midpoints for one index dimension, a 50 x 50
/// midpoint grid for two.
pub fn evaluation_grid(n_index: usize) -> Vec<Vec<f64>> {
    match n_index {
        1 => (0..1000).map(|i| vec![(i as f64 + 0.5) / 1000.0]).collect(),
        2 => (0..2500).map(|i| vec![((i / 50) as f64 + 0.5) / 50.0, ((i % 50) as f64 + 0.5) / 50.0]).collect(),
        m => {
            let per = 10usize;
            (0..per.pow(m as u32))
                .map(|mut i| {
                    (0..m)
                        .map(|_| {
                            let v = ((i % per) as f64 + 0.5) / per as f64;
                            i /= per;
                            v
                        })
                        .collect()
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    /// Grid mean squared error of each coefficient function.
    pub mse_beta: Vec<f64>,
    /// Grid average of each estimated coefficient function.
    pub mean_beta: Vec<f64>,
    /// Squared error of each coefficient function averaged over training rows.
    pub train_mse_beta: Vec<f64>,
    /// The same over held-out rows.
    pub test_mspe_beta: Vec<f64>,
    /// Mean squared prediction error of the response on held-out rows.
    pub test_mspe_y: f64,
    pub alpha_mspe: f64,
    pub sigma2_eps: f64,
    pub sigma2_eps_sq_err: f64,
    pub sigma2_alpha: Vec<f64>,
    pub sigma2_alpha_sq_err: Vec<f64>,
    pub elapsed_secs: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn coef_sq_error(
    basis: &TensorSplineBasis,
    beta: &DVector<f64>,
    truth: &Truth,
    k: usize,
    pts: &[Vec<f64>],
) -> Result<f64> {
    if pts.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for h in pts {
        let e = coefficient_function(basis, beta, k, h)? - truth.coefficient(k, h);
        acc += e * e;
    }
    Ok(acc / pts.len() as f64)
}

/// Compares a fit with the truth on the evaluation grid, the training rows
/// and the held-out rows.
pub fn evaluate(fit: &FitResult, data: &Dataset) -> Result<MetricsReport> {
    let basis = data.basis()?;
    let beta = &fit.params.beta;
    let n_coef = data.dims.n_covariates + 1;
    let grid = evaluation_grid(data.dims.n_index);
    let train_pts: Vec<Vec<f64>> = data.partitions.iter().flat_map(|p| rows_of(&p.h)).collect();
    let test_pts = rows_of(&data.test.h);

    let mut mse_beta = Vec::new();
    let mut mean_beta = Vec::new();
    let mut train_mse_beta = Vec::new();
    let mut test_mspe_beta = Vec::new();
    for k in 0..n_coef {
        mse_beta.push(coef_sq_error(&basis, beta, &data.truth, k, &grid)?);
        let mut s = 0.0;
        for h in &grid {
            s += coefficient_function(&basis, beta, k, h)?;
        }
        mean_beta.push(s / grid.len() as f64);
        train_mse_beta.push(coef_sq_error(&basis, beta, &data.truth, k, &train_pts)?);
        test_mspe_beta.push(coef_sq_error(&basis, beta, &data.truth, k, &test_pts)?);
    }

    let test_mspe_y = if data.test.n_rows() == 0 {
        0.0
    } else {
        let design = expand_design(&data.test.x, &data.test.h, &basis)?;
        let resid = &data.test.y - design * beta - &data.test.z * &fit.params.alpha;
        resid.norm_squared() / data.test.n_rows() as f64
    };
    let alpha_true = DVector::from_column_slice(&data.truth.alpha);
    let alpha_mspe = (&fit.params.alpha - &alpha_true).norm_squared() / alpha_true.len().max(1) as f64;
    let s2 = fit.params.sigma2_eps();
    let sigma2_alpha = fit.params.variance.sigma_alpha.variances();
    let true_alpha_var = data.truth.sigma_alpha_variances();
    let sigma2_alpha_sq_err = sigma2_alpha
        .iter()
        .enumerate()
        .map(|(i, v)| (v - true_alpha_var.get(i).or(true_alpha_var.first()).copied().unwrap_or(0.0)).powi(2))
        .collect();
    Ok(MetricsReport {
        method: fit.method,
        mse_beta,
        mean_beta,
        train_mse_beta,
        test_mspe_beta,
        test_mspe_y,
        alpha_mspe,
        sigma2_eps: s2,
        sigma2_eps_sq_err: (s2 - data.truth.sigma2_eps).powi(2),
        sigma2_alpha,
        sigma2_alpha_sq_err,
        elapsed_secs: fit.elapsed_secs,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

impl MetricsReport {
    /// Named scalar metrics in a stable order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, v) in self.mse_beta.iter().enumerate() {
            out.push((format!("mse_beta{k}"), *v));
        }
        for (k, v) in self.mean_beta.iter().enumerate() {
            out.push((format!("mean_beta{k}"), *v));
        }
        for (k, v) in self.train_mse_beta.iter().enumerate() {
            out.push((format!("train_mse_beta{k}"), *v));
        }
        for (k, v) in self.test_mspe_beta.iter().enumerate() {
            out.push((format!("test_mspe_beta{k}"), *v));
        }
        out.push(("test_mspe_y".into(), self.test_mspe_y));
        out.push(("alpha_mspe".into(), self.alpha_mspe));
        out.push(("sigma2_eps".into(), self.sigma2_eps));
        out.push(("sigma2_eps_sq_err".into(), self.sigma2_eps_sq_err));
        for (k, v) in self.sigma2_alpha.iter().enumerate() {
            out.push((format!("sigma2_alpha{}", k + 1), *v));
        }
        for (k, v) in self.sigma2_alpha_sq_err.iter().enumerate() {
            out.push((format!("sigma2_alpha{}_sq_err", k + 1), *v));
        }
        out.push(("elapsed_secs".into(), self.elapsed_secs));
        out.push(("iterations".into(), self.iterations as f64));
        out.push(("converged".into(), if self.converged { 1.0 } else { 0.0 }));
        out
    }

    /// Tab-separated `metric value` table.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("metric\t{}\n", self.method.label());
        for (name, v) in self.rows() {
            s.push_str(&format!("{name}\t{v:.6e}\n"));
        }
        s
    }
}

/// Pearson correlation; `NaN` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return f64::NAN;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Estimated coefficient function with a pointwise 95% band from the
/// inverse information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub h: Vec<f64>,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn coefficient_curves(
    basis: &TensorSplineBasis,
    params: &ModelParams,
    info: &DMatrix<f64>,
    grid: &[Vec<f64>],
) -> Result<Vec<CurvePoint>> {
    let cov = info.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| VcmmError::Singular {
        what: "information matrix",
        min_eigenvalue: crate::linalg::min_eigenvalue(info),
    })?;
    let q = basis.len();
    let n_coef = params.beta.len() / q;
    let mut out = Vec::with_capacity(n_coef * grid.len());
    for k in 0..n_coef {
        let block = cov.view((k * q, k * q), (q, q));
        for h in grid {
            let phi = DVector::from_vec(basis.eval(h)?);
            let estimate = phi.dot(&params.beta.rows(k * q, q));
            let se = (phi.dot(&(block * &phi))).max(0.0).sqrt();
            out.push(CurvePoint {
                k,
                h: h.clone(),
                estimate,
                lower: estimate - 1.96 * se,
                upper: estimate + 1.96 * se,
            });
        }
    }
    Ok(out)
}
