//! Run configuration: a TOML file whose keys mirror the command-line flags.
//! Flags win over file values; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcmm::distrib::ProtocolMode;
use vcmm::estimator::{FitConfig, Method};
use vcmm::linalg::{SpectralMode, Truncation};

use crate::CliError;

pub const DEFAULT_OUT: &str = "vcmm-out";
pub const DEFAULT_BUDGET_C: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    Vcmp,
}

impl FileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            FileFormat::Csv => "csv",
            FileFormat::Vcmp => "vcmp",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: Option<bool>,
    pub example: Option<u8>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub q: Option<usize>,
    pub format: Option<FileFormat>,
    pub data: Option<PathBuf>,
    pub method: Option<Method>,
    pub methods: Option<Vec<Method>>,
    pub mode: Option<ProtocolMode>,
    pub budget_c: Option<f64>,
    pub svd: Option<String>,
    pub reps: Option<usize>,
    pub max_iter: Option<usize>,
    pub tol_grad: Option<f64>,
    pub tol_param: Option<f64>,
    /// Full estimator settings; the flat keys above are applied on top.
    pub fit: Option<FitConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("--config: cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("--config: {}: {e}", path.display())))
    }

    /// Takes every value set in `flags`, keeping `self` elsewhere.
    pub fn overlay(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            seed: flags.seed.or(self.seed),
            out: flags.out.or(self.out),
            quiet: flags.quiet.or(self.quiet),
            example: flags.example.or(self.example),
            n: flags.n.or(self.n),
            k: flags.k.or(self.k),
            q: flags.q.or(self.q),
            format: flags.format.or(self.format),
            data: flags.data.or(self.data),
            method: flags.method.or(self.method),
            methods: flags.methods.or(self.methods),
            mode: flags.mode.or(self.mode),
            budget_c: flags.budget_c.or(self.budget_c),
            svd: flags.svd.or(self.svd),
            reps: flags.reps.or(self.reps),
            max_iter: flags.max_iter.or(self.max_iter),
            tol_grad: flags.tol_grad.or(self.tol_grad),
            tol_param: flags.tol_param.or(self.tol_param),
            fit: flags.fit.or(self.fit),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn budget_c(&self) -> Result<f64, CliError> {
        let c = self.budget_c.unwrap_or(DEFAULT_BUDGET_C);
        if !(c.is_finite() && c > 0.0) {
            return Err(CliError::config(format!("--budget-c must be a positive number, got {c}")));
        }
        Ok(c)
    }

    pub fn fit_config(&self, method: Method) -> Result<FitConfig, CliError> {
        let mut cfg = self.fit.clone().unwrap_or_default();
        cfg.method = method;
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.tol_grad {
            cfg.tol_grad = v;
        }
        if let Some(v) = self.tol_param {
            cfg.tol_param = v;
        }
        if let Some(s) = &self.svd {
            cfg.svd_mode = parse_svd(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.gibbs.seed = seed;
        }
        cfg.validate().map_err(|e| CliError::config(format!("fit settings: {e}")))?;
        Ok(cfg)
    }
}

/// `full`, a relative threshold such as `1e-6`, or `rank:<r>`.
pub fn parse_svd(s: &str) -> Result<SpectralMode, CliError> {
    let bad = || CliError::config(format!("--svd expects `full`, a threshold or `rank:<r>`, got `{s}`"));
    if s == "full" {
        return Ok(SpectralMode::Full);
    }
    if let Some(r) = s.strip_prefix("rank:") {
        let r: usize = r.parse().map_err(|_| bad())?;
        if r == 0 {
            return Err(bad());
        }
        return Ok(SpectralMode::Truncated(Truncation::Rank(r)));
    }
    let tau: f64 = s.parse().map_err(|_| bad())?;
    if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
        return Err(bad());
    }
    Ok(SpectralMode::truncated(tau))
}
