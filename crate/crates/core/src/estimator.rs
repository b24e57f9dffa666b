//! Estimators that work from aggregated sufficient statistics.
//!
//! The joint posterior of `(beta, alpha)` is Gaussian with precision
//!
//! ```text
//! [ C/s2 + P     B/s2            ]
//! [ B^T/s2       H/s2 + Sigma^-1 ]
//! ```
//!
//! Every estimator here is some way of reaching (or sampling around) its mode
//! without touching raw rows:
//!
//! * [`block_fit`] alternates the two conditional means (block Gauss-Seidel),
//!   optionally refreshing the variance components between sweeps;
//! * [`svd_fit`] runs the same sweeps through spectral solves of
//!   `G = C + s2 P` and `H_aug = H + s2 Sigma^-1`;
//! * [`onestep_fit`] takes a single Newton step from a pilot fitted on one
//!   node, using the summed node scores and that node's curvature;
//! * [`gibbs_sample`] draws from the two full conditionals.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VcmmError};
use crate::linalg::{
    self, spectral_decompose, stabilized_solve, SpectralFactors, SpectralMode, SymmetricSpectrum, Truncation,
};
use crate::model::{
    stack, symmetrize_in_place, ModelParams, Partition, Penalty, PenaltyKind, RandomEffectCov, VarianceComponents,
    VARIANCE_FLOOR,
};
use crate::spline::TensorSplineBasis;
use crate::suffstats::{aggregate, compute_local, gradient, local_residual_ss, local_score, ScoreVector, SuffStats};

/// Tolerance on the relative size of a negative residual sum of squares
/// before it is treated as inconsistent summaries rather than rounding.
pub const NEGATIVE_RSS_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Ss,
    Svd,
    Onestep,
    Gibbs,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Ss => "ss",
            Method::Svd => "svd",
            Method::Onestep => "onestep",
            Method::Gibbs => "gibbs",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = VcmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Method::Direct),
            "ss" => Ok(Method::Ss),
            "svd" => Ok(Method::Svd),
            "onestep" => Ok(Method::Onestep),
            "gibbs" => Ok(Method::Gibbs),
            other => Err(VcmmError::InvalidSpec(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceUpdate {
    Fixed,
    Iterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { n_iter: 20_000, burn_in: 2_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub method: Method,
    pub max_iter: usize,
    pub tol_grad: f64,
    pub tol_param: f64,
    pub variance_update: VarianceUpdate,
    pub svd_mode: SpectralMode,
    /// Mode for `G = C + s2 P`; `svd_mode` applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svd_mode_fixed: Option<SpectralMode>,
    /// Index of the pivot node among the supplied partitions.
    pub pivot_node: usize,
    pub gibbs: GibbsConfig,
    /// After each sweep, minimize the objective over the span of the last
    /// two sweep displacements. Skipped for truncated spectral solves.
    pub accelerate: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            method: Method::Ss,
            max_iter: 20_000,
            tol_grad: 1e-8,
            tol_param: 1e-10,
            variance_update: VarianceUpdate::Iterate,
            svd_mode: SpectralMode::default(),
            svd_mode_fixed: None,
            pivot_node: 0,
            gibbs: GibbsConfig::default(),
            accelerate: true,
        }
    }
}

impl FitConfig {
    pub fn fixed_variance(method: Method) -> Self {
        Self { method, variance_update: VarianceUpdate::Fixed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_grad > 0.0) || !(self.tol_param > 0.0) {
            return Err(VcmmError::InvalidSpec("tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(VcmmError::InvalidSpec("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Posterior mean and precision blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBlocks {
    pub mu_beta: DVector<f64>,
    pub mu_alpha: DVector<f64>,
    /// `C / s2 + P`.
    pub v_beta: DMatrix<f64>,
    /// `H / s2 + Sigma^-1`.
    pub v_alpha: DMatrix<f64>,
    /// `B / s2`.
    pub v_beta_alpha: DMatrix<f64>,
}

impl PosteriorBlocks {
    pub fn mu(&self) -> DVector<f64> {
        stack(&self.mu_beta, &self.mu_alpha)
    }

    pub fn precision(&self) -> DMatrix<f64> {
        assemble_blocks(&self.v_beta, &self.v_beta_alpha, &self.v_alpha)
    }
}

fn assemble_blocks(top_left: &DMatrix<f64>, off: &DMatrix<f64>, bottom_right: &DMatrix<f64>) -> DMatrix<f64> {
    let (f, q) = (top_left.nrows(), bottom_right.nrows());
    let mut out = DMatrix::zeros(f + q, f + q);
    out.view_mut((0, 0), (f, f)).copy_from(top_left);
    out.view_mut((0, f), (f, q)).copy_from(off);
    out.view_mut((f, 0), (q, f)).copy_from(&off.transpose());
    out.view_mut((f, f), (q, q)).copy_from(bottom_right);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub method: Method,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
    pub gradient_norm: f64,
    #[serde(skip)]
    pub info_matrix: Option<DMatrix<f64>>,
    pub elapsed_secs: f64,
}

fn check_dims(agg: &SuffStats, params: &ModelParams) -> Result<()> {
    if params.beta.len() != agg.fixed_len() {
        return Err(VcmmError::DimensionMismatch {
            field: "beta",
            expected: agg.fixed_len(),
            found: params.beta.len(),
        });
    }
    if params.alpha.len() != agg.n_random() {
        return Err(VcmmError::DimensionMismatch {
            field: "alpha",
            expected: agg.n_random(),
            found: params.alpha.len(),
        });
    }
    params.variance.validate(agg.n_random())
}

/// `Sigma^-1` and `log det Sigma` for one variance state.
struct Prior {
    sigma_inv: DMatrix<f64>,
    logdet: f64,
}

impl Prior {
    fn new(variance: &VarianceComponents, q: usize) -> Result<Self> {
        let sigma_inv = variance.sigma_alpha.inverse(q)?;
        let logdet = if q == 0 { 0.0 } else { variance.sigma_alpha.logdet(q)? };
        Ok(Self { sigma_inv, logdet })
    }

    fn objective(&self, params: &ModelParams, agg: &SuffStats) -> f64 {
        let s2 = params.sigma2_eps();
        let rss = agg.residual_ss(&params.beta, &params.alpha);
        let beta_pen = params.beta.dot(&(&params.penalty.matrix * &params.beta));
        let alpha_pen = params.alpha.dot(&(&self.sigma_inv * &params.alpha));
        rss / (2.0 * s2) + 0.5 * agg.n as f64 * s2.ln() + 0.5 * beta_pen + 0.5 * alpha_pen + 0.5 * self.logdet
    }

    fn gradient_norm(&self, params: &ModelParams, agg: &SuffStats) -> f64 {
        let s2 = params.sigma2_eps();
        let g_beta =
            (&agg.xx * &params.beta + &agg.xz * &params.alpha - &agg.xy) / s2 + &params.penalty.matrix * &params.beta;
        let g_alpha =
            (agg.xz.tr_mul(&params.beta) + &agg.zz * &params.alpha - &agg.zy) / s2 + &self.sigma_inv * &params.alpha;
        g_beta.amax().max(g_alpha.amax())
    }
}

/// `G = C + s2 P` and `H_aug = H + s2 Sigma^-1`.
pub fn augmented_systems(
    agg: &SuffStats,
    variance: &VarianceComponents,
    penalty: &Penalty,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s2 = variance.sigma2_eps;
    let sigma_inv = variance.sigma_alpha.inverse(agg.n_random())?;
    let g = &agg.xx + &penalty.matrix * s2;
    let mut h = &agg.zz + sigma_inv * s2;
    symmetrize_in_place(&mut h);
    Ok((g, h))
}

/// Eigendecompositions of `C` and `H`, reused across variance refreshes
/// when the added prior term is a multiple of the identity.
struct SpectralCache {
    fixed_mode: SpectralMode,
    random_mode: SpectralMode,
    xx: Option<SymmetricSpectrum>,
    zz: Option<SymmetricSpectrum>,
}

impl SpectralCache {
    fn new(cfg: &FitConfig) -> Self {
        Self { fixed_mode: cfg.svd_mode_fixed.unwrap_or(cfg.svd_mode), random_mode: cfg.svd_mode, xx: None, zz: None }
    }

    fn exact(&self, mode: SpectralMode) -> bool {
        !matches!(mode, SpectralMode::Randomized { .. })
    }
}

/// `lambda` when the penalty matrix is `lambda I`.
fn ridge_weight(penalty: &Penalty) -> Option<f64> {
    (penalty.spec.kind == PenaltyKind::Ridge && penalty.spec.block_lambdas.is_none()).then_some(penalty.spec.lambda)
}

enum BlockSolver {
    Cholesky { g: Cholesky<f64, Dyn>, h: Cholesky<f64, Dyn> },
    Spectral { g: SpectralFactors, h: SpectralFactors },
}

impl BlockSolver {
    fn direct(agg: &SuffStats, params: &ModelParams) -> Result<Self> {
        let (g, h) = augmented_systems(agg, &params.variance, &params.penalty)?;
        Ok(BlockSolver::Cholesky { g: linalg::cholesky(&g, "C + s2 P")?, h: linalg::cholesky(&h, "H + s2 Sigma^-1")? })
    }

    fn spectral(agg: &SuffStats, params: &ModelParams, cache: &mut SpectralCache) -> Result<Self> {
        let s2 = params.sigma2_eps();
        let g = match ridge_weight(&params.penalty) {
            Some(lambda) if cache.exact(cache.fixed_mode) => {
                if cache.xx.is_none() {
                    cache.xx = Some(SymmetricSpectrum::new(&agg.xx)?);
                }
                cache.xx.as_ref().expect("just filled").shifted_factors(s2 * lambda, cache.fixed_mode)?
            }
            _ => spectral_decompose(&(&agg.xx + &params.penalty.matrix * s2), cache.fixed_mode)?,
        };
        let h = match &params.variance.sigma_alpha {
            RandomEffectCov::Isotropic { sigma2 } if cache.exact(cache.random_mode) => {
                if cache.zz.is_none() {
                    cache.zz = Some(SymmetricSpectrum::new(&agg.zz)?);
                }
                cache.zz.as_ref().expect("just filled").shifted_factors(s2 / sigma2, cache.random_mode)?
            }
            _ => {
                let (_, h_aug) = augmented_systems(agg, &params.variance, &params.penalty)?;
                spectral_decompose(&h_aug, cache.random_mode)?
            }
        };
        Ok(BlockSolver::Spectral { g, h })
    }

    fn solve_beta(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            BlockSolver::Cholesky { g, .. } => Ok(g.solve(rhs)),
            BlockSolver::Spectral { g, .. } => stabilized_solve(g, rhs),
        }
    }

    fn solve_alpha(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            BlockSolver::Cholesky { h, .. } => Ok(h.solve(rhs)),
            BlockSolver::Spectral { h, .. } => stabilized_solve(h, rhs),
        }
    }
}

/// Closed-form variance updates:
/// `s2 = RSS / N` and `Sigma_alpha` projected from `alpha` onto its structure.
pub fn update_variance(theta: &ModelParams, agg: &SuffStats) -> Result<VarianceComponents> {
    if agg.n == 0 {
        return Err(VcmmError::InvalidSpec("variance update needs at least one observation".into()));
    }
    let rss = agg.residual_ss(&theta.beta, &theta.alpha);
    let sigma2_eps = residual_variance(rss, agg.yy, agg.n)?;
    Ok(VarianceComponents::new(sigma2_eps, theta.variance.sigma_alpha.project(&theta.alpha)))
}

/// `RSS / N`, clamped at the variance floor when rounding pushes it slightly
/// negative; a clearly negative value is an error.
pub fn residual_variance(rss: f64, yy: f64, n: u64) -> Result<f64> {
    let scale = yy.abs().max(1.0);
    if rss < -NEGATIVE_RSS_TOLERANCE * scale {
        return Err(VcmmError::NegativeVariance(rss));
    }
    let s2 = rss / n as f64;
    if s2 < VARIANCE_FLOOR {
        if rss < 0.0 {
            log::warn!("residual sum of squares {rss:e} clamped to the variance floor");
        }
        return Ok(VARIANCE_FLOOR);
    }
    Ok(s2)
}

/// Posterior mean and precision blocks at fixed variance components.
pub fn posterior_blocks(theta: &ModelParams, agg: &SuffStats) -> Result<PosteriorBlocks> {
    check_dims(agg, theta)?;
    let s2 = theta.sigma2_eps();
    let q = agg.n_random();
    let v_beta = &agg.xx / s2 + &theta.penalty.matrix;
    let mut v_alpha = &agg.zz / s2 + theta.variance.sigma_alpha.inverse(q)?;
    symmetrize_in_place(&mut v_alpha);
    let v_beta_alpha = &agg.xz / s2;
    let precision = assemble_blocks(&v_beta, &v_beta_alpha, &v_alpha);
    let chol = Cholesky::new(precision.clone()).ok_or_else(|| VcmmError::Singular {
        what: "joint posterior precision",
        min_eigenvalue: linalg::min_eigenvalue(&precision),
    })?;
    let mu = chol.solve(&(agg.cross() / s2));
    let f = agg.fixed_len();
    Ok(PosteriorBlocks {
        mu_beta: mu.rows(0, f).into_owned(),
        mu_alpha: mu.rows(f, q).into_owned(),
        v_beta,
        v_alpha,
        v_beta_alpha,
    })
}

/// Plug-in information of the penalized joint objective:
/// `[[C/s2 + P, B/s2], [B^T/s2, H/s2 + Sigma^-1]]`.
pub fn fisher_info(agg: &SuffStats, variance: &VarianceComponents, penalty: &Penalty) -> Result<DMatrix<f64>> {
    variance.validate(agg.n_random())?;
    if penalty.dim() != agg.fixed_len() {
        return Err(VcmmError::DimensionMismatch { field: "penalty", expected: agg.fixed_len(), found: penalty.dim() });
    }
    let s2 = variance.sigma2_eps;
    let mut v_alpha = &agg.zz / s2 + variance.sigma_alpha.inverse(agg.n_random())?;
    symmetrize_in_place(&mut v_alpha);
    Ok(assemble_blocks(&(&agg.xx / s2 + &penalty.matrix), &(&agg.xz / s2), &v_alpha))
}

/// Square roots of the diagonal of `info^-1`.
pub fn standard_errors(info: &DMatrix<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(info.clone()).ok_or_else(|| VcmmError::Singular {
        what: "information matrix",
        min_eigenvalue: linalg::min_eigenvalue(info),
    })?;
    Ok(chol.inverse().diagonal().map(|v| v.max(0.0).sqrt()))
}

#[derive(Clone, Copy)]
enum SolvePath {
    Direct,
    Spectral,
}

/// Consecutive sweeps with a step below `tol_param` that count as converged.
const STALL_SWEEPS: usize = 3;

fn near_exact(mode: SpectralMode) -> bool {
    match mode {
        SpectralMode::Full => true,
        SpectralMode::Truncated(Truncation::Relative(tau)) => tau <= 1e-8,
        _ => false,
    }
}

/// Minimizer of the (fixed-variance) objective over `theta + span(dirs)`,
/// returned as the displacement to add. The objective is quadratic in
/// `theta`, so the decrease is computed exactly from the reduced system
/// rather than from two nearly equal objective values.
fn subspace_step(agg: &SuffStats, params: &ModelParams, prior: &Prior, dirs: &[DVector<f64>]) -> Option<DVector<f64>> {
    let f = params.beta.len();
    let s2 = params.sigma2_eps();
    let pen = &params.penalty.matrix;
    let apply = |v: &DVector<f64>| {
        let (vb, va) = (v.rows(0, f), v.rows(f, v.len() - f));
        let kb = (&agg.xx * vb + &agg.xz * va) / s2 + pen * vb;
        let ka = (agg.xz.tr_mul(&vb) + &agg.zz * va) / s2 + &prior.sigma_inv * va;
        stack(&kb, &ka)
    };
    let g_beta = (&agg.xx * &params.beta + &agg.xz * &params.alpha - &agg.xy) / s2 + pen * &params.beta;
    let g_alpha =
        (agg.xz.tr_mul(&params.beta) + &agg.zz * &params.alpha - &agg.zy) / s2 + &prior.sigma_inv * &params.alpha;
    let g = stack(&g_beta, &g_alpha);
    let d = DMatrix::from_columns(dirs);
    let kd = DMatrix::from_columns(&dirs.iter().map(apply).collect::<Vec<_>>());
    let m = d.tr_mul(&kd);
    let rhs = -d.tr_mul(&g);
    let eig = nalgebra::SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let top = eig.eigenvalues.amax();
    if !(top > 0.0) || !top.is_finite() {
        return None;
    }
    let proj = eig.eigenvectors.tr_mul(&rhs);
    let coef = DVector::from_fn(proj.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > 1e-12 * top {
            proj[i] / l
        } else {
            0.0
        }
    });
    let c = &eig.eigenvectors * coef;
    // exact change of the quadratic objective along D c
    let change = -rhs.dot(&c) + 0.5 * c.dot(&(&m * &c));
    let t = &d * c;
    (change <= 0.0 && t.iter().all(|v| v.is_finite())).then_some(t)
}

fn sweep_fit(
    agg: &SuffStats,
    init: &ModelParams,
    cfg: &FitConfig,
    path: SolvePath,
    method: Method,
) -> Result<FitResult> {
    cfg.validate()?;
    check_dims(agg, init)?;
    let start = Instant::now();
    let mut cache = SpectralCache::new(cfg);
    let mut build = |p: &ModelParams| match path {
        SolvePath::Direct => BlockSolver::direct(agg, p),
        SolvePath::Spectral => BlockSolver::spectral(agg, p, &mut cache),
    };

    let accelerate = cfg.accelerate
        && match path {
            SolvePath::Direct => true,
            SolvePath::Spectral => near_exact(cfg.svd_mode) && near_exact(cfg.svd_mode_fixed.unwrap_or(cfg.svd_mode)),
        };
    let mut params = init.clone();
    let mut solver = build(&params)?;
    let mut prior = Prior::new(&params.variance, agg.n_random())?;
    let mut trace = vec![prior.objective(&params, agg)];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = prior.gradient_norm(&params, agg);
    let mut history: Vec<DVector<f64>> = Vec::with_capacity(2);
    let mut stalled = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        let beta = solver.solve_beta(&(&agg.xy - &agg.xz * &params.alpha))?;
        let alpha = solver.solve_alpha(&(&agg.zy - agg.xz.tr_mul(&beta)))?;
        let prev = stack(&params.beta, &params.alpha);
        params.beta = beta;
        params.alpha = alpha;
        if accelerate {
            let disp = stack(&params.beta, &params.alpha) - &prev;
            if history.len() == 2 {
                history.remove(0);
            }
            history.push(disp);
            if let Some(t) = subspace_step(agg, &params, &prior, &history) {
                let f = params.beta.len();
                params.beta += t.rows(0, f);
                params.alpha += t.rows(f, t.len() - f);
            }
            let last = history.last_mut().expect("pushed above");
            *last = stack(&params.beta, &params.alpha) - &prev;
        }
        let step = (stack(&params.beta, &params.alpha) - &prev).amax();
        if !step.is_finite() {
            return Err(VcmmError::NonFinite("block update"));
        }

        if cfg.variance_update == VarianceUpdate::Iterate {
            params.variance = update_variance(&params, agg)?;
            solver = build(&params)?;
            prior = Prior::new(&params.variance, agg.n_random())?;
        }
        trace.push(prior.objective(&params, agg));
        grad_norm = prior.gradient_norm(&params, agg);
        stalled = if step <= cfg.tol_param { stalled + 1 } else { 0 };
        if grad_norm <= cfg.tol_grad || stalled >= STALL_SWEEPS {
            converged = true;
            break;
        }
    }

    let info = fisher_info(agg, &params.variance, &params.penalty).ok();
    Ok(FitResult {
        params,
        method,
        iterations,
        converged,
        objective_trace: trace,
        gradient_norm: grad_norm,
        info_matrix: info,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Block Gauss-Seidel on aggregated summaries:
/// `beta = (C + s2 P)^-1 (b - B alpha)`, `alpha = (H + s2 Sigma^-1)^-1 (d - B^T beta)`,
/// with variance components refreshed after each sweep when configured.
pub fn block_fit(agg: &SuffStats, init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    sweep_fit(agg, init, cfg, SolvePath::Direct, Method::Ss)
}

/// [`block_fit`] with every block solve done through spectral factors of
/// `G` and `H_aug`, recomputed whenever the variance components change.
pub fn svd_fit(agg: &SuffStats, init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    sweep_fit(agg, init, cfg, SolvePath::Spectral, Method::Svd)
}

/// Pivot-node curvature scaled to the full sample:
/// `(N / n_1) [[C_1, B_1], [B_1^T, H_1]] / s2 + blockdiag(P, Sigma^-1)`.
///
/// `pivot_gram` is the pivot's unscaled `[[C_1, B_1], [B_1^T, H_1]]`.
pub fn pivot_hessian(
    pivot_gram: &DMatrix<f64>,
    pivot_n: u64,
    total_n: u64,
    pilot: &ModelParams,
) -> Result<DMatrix<f64>> {
    if pivot_n == 0 {
        return Err(VcmmError::InvalidSpec("pivot node has no observations".into()));
    }
    let f = pilot.beta.len();
    let q = pilot.alpha.len();
    if pivot_gram.nrows() != f + q {
        return Err(VcmmError::DimensionMismatch {
            field: "pivot Hessian",
            expected: f + q,
            found: pivot_gram.nrows(),
        });
    }
    let scale = total_n as f64 / pivot_n as f64 / pilot.sigma2_eps();
    let mut k1 = pivot_gram * scale;
    let mut top = k1.view_mut((0, 0), (f, f));
    top += &pilot.penalty.matrix;
    let sigma_inv = pilot.variance.sigma_alpha.inverse(q)?;
    let mut bottom = k1.view_mut((f, f), (q, q));
    bottom += sigma_inv;
    symmetrize_in_place(&mut k1);
    Ok(k1)
}

/// `theta_1 = theta_0 - K_1^-1 g(theta_0)` with `K_1` inverted through
/// its spectral factors.
pub fn onestep_update(
    pilot: &ModelParams,
    score: &ScoreVector,
    k1: &DMatrix<f64>,
    mode: SpectralMode,
) -> Result<ModelParams> {
    if !score.penalized {
        return Err(VcmmError::InvalidSpec("the one-step update needs the penalized global score".into()));
    }
    let factors = spectral_decompose(k1, mode)?;
    if factors.rank() < k1.nrows() {
        return Err(VcmmError::Singular { what: "pivot Hessian", min_eigenvalue: linalg::min_eigenvalue(k1) });
    }
    let step = stabilized_solve(&factors, &score.stacked())?;
    let theta = pilot.theta() - step;
    Ok(pilot.with_theta(&theta))
}

/// Variance refresh after the one-step update from the per-node residual
/// sums collected in the second round.
pub fn onestep_variance(
    updated: &ModelParams,
    rss_total: f64,
    yy_total: f64,
    n_total: u64,
) -> Result<VarianceComponents> {
    let sigma2_eps = residual_variance(rss_total, yy_total, n_total)?;
    Ok(VarianceComponents::new(sigma2_eps, updated.variance.sigma_alpha.project(&updated.alpha)))
}

/// Stages of the one-step estimator, exposed so a coordinator can run them
/// across a message boundary and reproduce [`onestep_fit`] exactly.
pub struct OneStep;

impl OneStep {
    /// Pilot fit on the pivot's summaries scaled up to `n_total` rows, the
    /// surrogate objective whose curvature is [`pivot_hessian`].
    pub fn pilot(pivot: &SuffStats, n_total: u64, init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
        if pivot.n == 0 {
            return Err(VcmmError::InvalidSpec("pivot node has no observations".into()));
        }
        if n_total < pivot.n {
            return Err(VcmmError::InvalidSpec("total rows smaller than pivot rows".into()));
        }
        let pilot_cfg = FitConfig { tol_grad: cfg.tol_grad.max(1e-8), ..cfg.clone() };
        block_fit(&pivot.scaled_to(n_total)?, init, &pilot_cfg)
    }

    /// Global penalized score from node-local unpenalized scores.
    pub fn global_score(node_scores: &[ScoreVector], pilot: &ModelParams) -> Result<ScoreVector> {
        ScoreVector::sum(node_scores)?.add_prior(pilot)
    }

    /// Final parameters after the second (residual-sum) round.
    pub fn finish(
        updated: &ModelParams,
        rss_total: f64,
        yy_total: f64,
        n_total: u64,
        cfg: &FitConfig,
    ) -> Result<ModelParams> {
        let mut out = updated.clone();
        if cfg.variance_update == VarianceUpdate::Iterate {
            out.variance = onestep_variance(updated, rss_total, yy_total, n_total)?;
        }
        Ok(out)
    }
}

/// One-step estimator from per-node summaries.
///
/// 1. Pilot `theta_0` by [`block_fit`] on the pivot node alone.
/// 2. Node scores at `theta_0` without prior terms, summed; prior added once.
/// 3. Pivot curvature `K_1` from [`pivot_hessian`].
/// 4. `theta_1 = theta_0 - K_1^-1 g(theta_0)`.
/// 5. `s2` from the summed node residual sums at `theta_1`.
/// 6. `Sigma_alpha` projected from `alpha_1`.
///
/// Steps 5 and 6 apply when `cfg.variance_update` is `Iterate`.
pub fn onestep_fit(local_stats: &[SuffStats], init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let pivot = local_stats.get(cfg.pivot_node).ok_or_else(|| {
        VcmmError::InvalidSpec(format!("pivot node {} does not exist ({} nodes)", cfg.pivot_node, local_stats.len()))
    })?;
    let n_total: u64 = local_stats.iter().map(|s| s.n).sum();
    let pilot = OneStep::pilot(pivot, n_total, init, cfg)?.params;

    let scores = local_stats.iter().map(|s| gradient(&pilot, s, false)).collect::<Result<Vec<_>>>()?;
    let score = OneStep::global_score(&scores, &pilot)?;
    let k1 = pivot_hessian(&pivot.gram(), pivot.n, n_total, &pilot)?;
    let updated = onestep_update(&pilot, &score, &k1, cfg.svd_mode)?;

    let rss_total: f64 = local_stats.iter().map(|s| s.residual_ss(&updated.beta, &updated.alpha)).sum();
    let params = OneStep::finish(&updated, rss_total, rss_total, n_total, cfg)?;

    OneStep::summarize(&score, &pivot.gram(), pivot.n, n_total, rss_total, params, start)
}

/// [`onestep_fit`] from raw partitions: only the pivot forms summaries;
/// every other node contributes a score and a residual sum computed by a
/// single pass over its rows.
pub fn onestep_fit_raw(
    partitions: &[Partition],
    basis: &TensorSplineBasis,
    init: &ModelParams,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let start = Instant::now();
    let pivot_part = partitions.get(cfg.pivot_node).ok_or_else(|| {
        VcmmError::InvalidSpec(format!("pivot node {} does not exist ({} nodes)", cfg.pivot_node, partitions.len()))
    })?;
    let pivot = compute_local(pivot_part, basis)?;
    let n_total: u64 = partitions.iter().map(|p| p.n_rows() as u64).sum();
    let pilot = OneStep::pilot(&pivot, n_total, init, cfg)?.params;

    let scores = partitions.iter().map(|p| local_score(p, basis, &pilot)).collect::<Result<Vec<_>>>()?;
    let score = OneStep::global_score(&scores, &pilot)?;
    let k1 = pivot_hessian(&pivot.gram(), pivot.n, n_total, &pilot)?;
    let updated = onestep_update(&pilot, &score, &k1, cfg.svd_mode)?;

    let rss_total = partitions.iter().map(|p| local_residual_ss(p, basis, &updated)).sum::<Result<f64>>()?;
    let params = OneStep::finish(&updated, rss_total, rss_total, n_total, cfg)?;

    OneStep::summarize(&score, &pivot.gram(), pivot.n, n_total, rss_total, params, start)
}

impl OneStep {
    /// Wraps a finished one-step estimate into a [`FitResult`] using only
    /// quantities the coordinator holds: the global score at the pilot, the
    /// pivot Gram matrix and the residual total at the update.
    ///
    /// `gradient_norm` is the score norm at the pilot, `objective_trace`
    /// holds the joint objective at the update, and `info_matrix` is the
    /// pivot curvature at the final variance components.
    pub fn summarize(
        pilot_score: &ScoreVector,
        pivot_gram: &DMatrix<f64>,
        pivot_n: u64,
        n_total: u64,
        rss_total: f64,
        params: ModelParams,
        start: Instant,
    ) -> Result<FitResult> {
        let q = params.alpha.len();
        let prior = Prior::new(&params.variance, q)?;
        let s2 = params.sigma2_eps();
        let objective = rss_total / (2.0 * s2)
            + 0.5 * n_total as f64 * s2.ln()
            + 0.5 * params.beta.dot(&(&params.penalty.matrix * &params.beta))
            + 0.5 * params.alpha.dot(&(&prior.sigma_inv * &params.alpha))
            + 0.5 * prior.logdet;
        let info = pivot_hessian(pivot_gram, pivot_n, n_total, &params).ok();
        Ok(FitResult {
            params,
            method: Method::Onestep,
            iterations: 1,
            converged: true,
            objective_trace: vec![objective],
            gradient_norm: pilot_score.norm_inf(),
            info_matrix: info,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Post burn-in draws of `theta = (beta, alpha)` from the alternating
/// Gibbs sampler.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    pub draws: Vec<DVector<f64>>,
    pub fixed_len: usize,
}

impl GibbsChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let dim = self.draws.first().map_or(0, |d| d.len());
        let mut acc = DVector::zeros(dim);
        for d in &self.draws {
            acc += d;
        }
        acc / self.draws.len().max(1) as f64
    }

    /// Ergodic averages after each retained draw.
    pub fn running_means(&self) -> Vec<DVector<f64>> {
        let dim = self.draws.first().map_or(0, |d| d.len());
        let mut acc = DVector::zeros(dim);
        self.draws
            .iter()
            .enumerate()
            .map(|(i, d)| {
                acc += d;
                &acc / (i + 1) as f64
            })
            .collect()
    }

    pub fn sample_sd(&self) -> DVector<f64> {
        let mean = self.mean();
        let n = self.draws.len();
        let mut acc = DVector::zeros(mean.len());
        for d in &self.draws {
            let c = d - &mean;
            acc += c.component_mul(&c);
        }
        (acc / (n.max(2) - 1) as f64).map(f64::sqrt)
    }

    /// Monte-Carlo standard error of the ergodic mean by non-overlapping
    /// batch means.
    pub fn mcse(&self, n_batches: usize) -> DVector<f64> {
        let n = self.draws.len();
        let batches = n_batches.clamp(2, n.max(2));
        let size = n / batches;
        let dim = self.draws.first().map_or(0, |d| d.len());
        if size == 0 {
            return DVector::from_element(dim, f64::INFINITY);
        }
        let means: Vec<DVector<f64>> = (0..batches)
            .map(|b| {
                let mut acc = DVector::zeros(dim);
                for d in &self.draws[b * size..(b + 1) * size] {
                    acc += d;
                }
                acc / size as f64
            })
            .collect();
        let grand = means.iter().fold(DVector::zeros(dim), |a, m| a + m) / batches as f64;
        let var = means.iter().fold(DVector::zeros(dim), |a, m| {
            let c = m - &grand;
            a + c.component_mul(&c)
        }) / (batches - 1) as f64;
        (var / batches as f64).map(f64::sqrt)
    }
}

/// Draws `beta | alpha ~ N(V_beta^-1 (b - B alpha) / s2, V_beta^-1)` and
/// `alpha | beta ~ N(V_alpha^-1 (d - B^T beta) / s2, V_alpha^-1)` in turn,
/// starting from zero.
pub fn gibbs_sample(
    variance: &VarianceComponents,
    penalty: &Penalty,
    agg: &SuffStats,
    cfg: &GibbsConfig,
) -> Result<GibbsChain> {
    variance.validate(agg.n_random())?;
    let s2 = variance.sigma2_eps;
    let q = agg.n_random();
    let f = agg.fixed_len();
    let v_beta = &agg.xx / s2 + &penalty.matrix;
    let mut v_alpha = &agg.zz / s2 + variance.sigma_alpha.inverse(q)?;
    symmetrize_in_place(&mut v_alpha);
    let chol_beta = Cholesky::new(v_beta.clone()).ok_or_else(|| VcmmError::Singular {
        what: "beta conditional precision",
        min_eigenvalue: linalg::min_eigenvalue(&v_beta),
    })?;
    let chol_alpha = Cholesky::new(v_alpha.clone()).ok_or_else(|| VcmmError::Singular {
        what: "alpha conditional precision",
        min_eigenvalue: linalg::min_eigenvalue(&v_alpha),
    })?;
    let l_beta = chol_beta.l();
    let l_alpha = chol_alpha.l();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut alpha = DVector::zeros(q);
    let mut draws = Vec::with_capacity(cfg.n_iter);
    for it in 0..cfg.burn_in + cfg.n_iter {
        let mean_beta = chol_beta.solve(&((&agg.xy - &agg.xz * &alpha) / s2));
        let noise = DVector::from_fn(f, |_, _| StandardNormal.sample(&mut rng));
        let beta = mean_beta + l_beta.tr_solve_lower_triangular(&noise).expect("positive Cholesky diagonal");

        let mean_alpha = chol_alpha.solve(&((&agg.zy - agg.xz.tr_mul(&beta)) / s2));
        let noise = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        alpha = mean_alpha + l_alpha.tr_solve_lower_triangular(&noise).expect("positive Cholesky diagonal");

        if it >= cfg.burn_in {
            draws.push(stack(&beta, &alpha));
        }
    }
    Ok(GibbsChain { draws, fixed_len: f })
}

/// Gibbs sampler wrapped as a fit: parameters are the ergodic means, the
/// variance components stay at `init`.
pub fn gibbs_fit(agg: &SuffStats, init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    check_dims(agg, init)?;
    let start = Instant::now();
    let chain = gibbs_sample(&init.variance, &init.penalty, agg, &cfg.gibbs)?;
    let params = init.with_theta(&chain.mean());
    let prior = Prior::new(&params.variance, agg.n_random())?;
    Ok(FitResult {
        objective_trace: vec![prior.objective(&params, agg)],
        gradient_norm: prior.gradient_norm(&params, agg),
        info_matrix: fisher_info(agg, &params.variance, &params.penalty).ok(),
        params,
        method: Method::Gibbs,
        iterations: cfg.gibbs.n_iter,
        converged: true,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Runs the configured summary-based estimator on per-node statistics.
/// Node statistics are aggregated in the order given.
pub fn fit_summaries(local_stats: &[SuffStats], init: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    match cfg.method {
        Method::Ss => block_fit(&aggregate(local_stats)?, init, cfg),
        Method::Svd => svd_fit(&aggregate(local_stats)?, init, cfg),
        Method::Onestep => onestep_fit(local_stats, init, cfg),
        Method::Gibbs => gibbs_fit(&aggregate(local_stats)?, init, cfg),
        Method::Direct => Err(VcmmError::InvalidSpec("the direct method needs raw partitions, not summaries".into())),
    }
}
