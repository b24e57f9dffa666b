//! Report files for `fit` and `replicate`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;
use vcmm::distrib::{BudgetReport, CommLedger, ProtocolMode};
use vcmm::estimator::{FitResult, Method};
use vcmm::model::RandomEffectCov;
use vcmm::simgen::{mean_sd, pearson, CurvePoint, MetricsReport};

use crate::CliError;

pub const REPORT: &str = "report.txt";
pub const METRICS: &str = "metrics.tsv";
pub const LEDGER: &str = "ledger.tsv";
pub const CURVES: &str = "curves.tsv";
pub const FIT_JSON: &str = "fit.json";
pub const TABLE_TXT: &str = "table.txt";
pub const TABLE_TSV: &str = "table.tsv";

pub struct FitOutputs<'a> {
    pub fit: &'a FitResult,
    pub mode: Option<ProtocolMode>,
    pub lambda: f64,
    pub se: Option<&'a DVector<f64>>,
    pub curves: &'a [CurvePoint],
    pub metrics: Option<&'a MetricsReport>,
    pub ledger: Option<(&'a CommLedger, &'a BudgetReport)>,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    method: Method,
    mode: Option<ProtocolMode>,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    elapsed_secs: f64,
    lambda: f64,
    sigma2_eps: f64,
    sigma_alpha: &'a RandomEffectCov,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    standard_errors: Option<Vec<f64>>,
    final_objective: Option<f64>,
    metrics: Option<&'a MetricsReport>,
    budget: Option<&'a BudgetReport>,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), contents)
        .map_err(|e| CliError::config(format!("--out: cannot write {}: {e}", dir.join(name).display())))
}

fn report_text(o: &FitOutputs<'_>) -> String {
    let fit = o.fit;
    let p = &fit.params;
    let mut s = String::new();
    let mode = o.mode.map_or("in-process", |m| match m {
        ProtocolMode::Summary => "summary protocol",
        ProtocolMode::Onestep => "onestep protocol",
    });
    let _ = writeln!(s, "method: {}\nexecution: {mode}", fit.method.label());
    let _ = writeln!(s, "converged: {}\niterations: {}", fit.converged, fit.iterations);
    let _ = writeln!(s, "gradient_norm: {:.6e}\nelapsed_secs: {:.6}", fit.gradient_norm, fit.elapsed_secs);
    let _ = writeln!(s, "lambda: {:.6e}", o.lambda);

    let _ = writeln!(s, "\n[variance]\nsigma2_eps: {:.6e}", p.sigma2_eps());
    for (i, v) in p.variance.sigma_alpha.variances().iter().enumerate() {
        let _ = writeln!(s, "sigma2_alpha{}: {v:.6e}", i + 1);
    }

    let _ = writeln!(s, "\n[parameters]\nname\testimate\tse");
    let fixed = p.beta.len();
    let values = p.beta.iter().chain(p.alpha.iter());
    for (i, v) in values.enumerate() {
        let name = if i < fixed { format!("beta[{i}]") } else { format!("alpha[{}]", i - fixed) };
        let se = o.se.map_or("NA".to_string(), |se| format!("{:.6e}", se[i]));
        let _ = writeln!(s, "{name}\t{v:.10e}\t{se}");
    }

    let _ = writeln!(s, "\n[trace]");
    for (i, f) in fit.objective_trace.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{f:.12e}");
    }

    let _ = writeln!(s, "\n[communication]");
    match o.ledger {
        Some((ledger, budget)) => {
            let _ = writeln!(
                s,
                "messages: {}\nupstream_scalars: {}\ndownstream_scalars: {}",
                ledger.entries.len(),
                ledger.upstream_total(),
                ledger.downstream_total()
            );
            let _ = writeln!(s, "{budget}");
        }
        None => {
            let _ = writeln!(s, "none (in-process fit)");
        }
    }
    s
}

fn curves_tsv(curves: &[CurvePoint]) -> String {
    let m = curves.first().map_or(0, |c| c.h.len());
    let mut s = String::from("k");
    for j in 0..m {
        let _ = write!(s, "\th{}", j + 1);
    }
    s.push_str("\testimate\tlower95\tupper95\n");
    for c in curves {
        let _ = write!(s, "{}", c.k);
        for h in &c.h {
            let _ = write!(s, "\t{h:.6}");
        }
        let _ = writeln!(s, "\t{:.10e}\t{:.10e}\t{:.10e}", c.estimate, c.lower, c.upper);
    }
    s
}

pub fn write_fit(dir: &Path, o: &FitOutputs<'_>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("--out: cannot create {}: {e}", dir.display())))?;
    write(dir, REPORT, &report_text(o))?;
    if let Some(m) = o.metrics {
        write(dir, METRICS, &m.to_tsv())?;
    }
    if let Some((ledger, _)) = o.ledger {
        write(dir, LEDGER, &ledger.to_tsv())?;
    }
    write(dir, CURVES, &curves_tsv(o.curves))?;
    let p = &o.fit.params;
    let summary = FitSummary {
        method: o.fit.method,
        mode: o.mode,
        converged: o.fit.converged,
        iterations: o.fit.iterations,
        gradient_norm: o.fit.gradient_norm,
        elapsed_secs: o.fit.elapsed_secs,
        lambda: o.lambda,
        sigma2_eps: p.sigma2_eps(),
        sigma_alpha: &p.variance.sigma_alpha,
        beta: p.beta.iter().copied().collect(),
        alpha: p.alpha.iter().copied().collect(),
        standard_errors: o.se.map(|se| se.iter().copied().collect()),
        final_objective: o.fit.objective_trace.last().copied(),
        metrics: o.metrics,
        budget: o.ledger.map(|(_, b)| b),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::config(e.to_string()))?;
    write(dir, FIT_JSON, &json)
}

/// Estimates whose agreement across methods is summarized by correlation.
fn correlated(name: &str) -> bool {
    name.starts_with("mean_beta")
        || name == "sigma2_eps"
        || (name.starts_with("sigma2_alpha") && !name.ends_with("_sq_err"))
}

/// `runs[r][m]` holds replication `r` of method `m`.
pub fn write_table(dir: &Path, methods: &[Method], runs: &[Vec<MetricsReport>]) -> Result<String, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("--out: cannot create {}: {e}", dir.display())))?;
    let names: Vec<String> = runs[0][0].rows().into_iter().map(|(n, _)| n).collect();
    let column = |m: usize, name: &str| -> Vec<f64> {
        runs.iter().map(|r| r[m].rows().into_iter().find(|(n, _)| n == name).map_or(f64::NAN, |(_, v)| v)).collect()
    };

    let mut tsv = String::from("metric\tmethod\tmean\tsd\n");
    let mut txt = format!("replications: {}\n\n{:<24}", runs.len(), "metric");
    for m in methods {
        let _ = write!(txt, "{:>28}", m.label());
    }
    txt.push('\n');
    for name in &names {
        let _ = write!(txt, "{name:<24}");
        for (mi, m) in methods.iter().enumerate() {
            let (mean, sd) = mean_sd(&column(mi, name));
            let _ = writeln!(tsv, "{name}\t{}\t{mean:.10e}\t{sd:.10e}", m.label());
            let _ = write!(txt, "{:>28}", format!("{mean:.4e} ({sd:.2e})"));
        }
        txt.push('\n');
    }

    if methods.len() > 1 && runs.len() > 2 {
        let _ = writeln!(txt, "\ncorrelation with {} across replications", methods[0].label());
        for name in names.iter().filter(|n| correlated(n)) {
            let base = column(0, name);
            let _ = write!(txt, "{name:<24}{:>28}", "");
            for (mi, method) in methods.iter().enumerate().skip(1) {
                let r = pearson(&column(mi, name), &base);
                let _ = writeln!(tsv, "corr_{name}\t{}\t{r:.10e}\tNaN", method.label());
                let _ = write!(txt, "{:>28}", format!("{r:.4}"));
            }
            txt.push('\n');
        }
    }
    write(dir, TABLE_TSV, &tsv)?;
    write(dir, TABLE_TXT, &txt)?;
    Ok(txt)
}
