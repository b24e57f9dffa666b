use std::path::Path;

use rayon::prelude::*;
use vcmm::distrib::{describe, deserialize, run_protocol, ProtocolConfig, ProtocolMode, MAGIC};
use vcmm::estimator::{fisher_info, standard_errors, Method};
use vcmm::io::{read_partition_bin, read_partition_csv, PARTITION_MAGIC};
use vcmm::model::Partition;
use vcmm::simgen::{coefficient_curves, evaluate, prepare, run_method, MetricsReport, ScenarioSpec, Truth};
use vcmm::suffstats::{aggregate, compute_all};

use crate::config::{FileFormat, RunConfig};
use crate::dataset::{obtain, scenario, write_dataset, Manifest};
use crate::report::{write_fit, write_table, FitOutputs};
use crate::{CliError, EXIT_NOT_CONVERGED};

const DEFAULT_REPS: usize = 10;

fn say(cfg: &RunConfig, msg: impl AsRef<str>) {
    if cfg.quiet != Some(true) {
        println!("{}", msg.as_ref());
    }
}

pub fn generate(cfg: &RunConfig) -> Result<u8, CliError> {
    let spec = scenario(cfg)?;
    let data = vcmm::simgen::generate(&spec)?;
    let out = cfg.out_dir();
    let written = write_dataset(&out, &data, cfg.format.unwrap_or(FileFormat::Csv))?;
    say(cfg, format!("wrote {} files to {}", written.len(), out.display()));
    Ok(0)
}

/// Grid for reported curves: 101 points on one index, 21 x 21 on two.
fn curve_grid(n_index: usize) -> Vec<Vec<f64>> {
    let per: usize = if n_index == 1 { 101 } else { 21 };
    let total = per.pow(n_index as u32);
    (0..total)
        .map(|mut i| {
            let mut h = vec![0.0; n_index];
            for v in h.iter_mut().rev() {
                *v = (i % per) as f64 / (per - 1) as f64;
                i /= per;
            }
            h
        })
        .collect()
}

pub fn fit(cfg: &RunConfig) -> Result<u8, CliError> {
    let data = obtain(cfg)?;
    let method =
        cfg.method.unwrap_or(if cfg.mode == Some(ProtocolMode::Onestep) { Method::Onestep } else { Method::Ss });
    let fit_cfg = cfg.fit_config(method)?;
    let basis = data.basis()?;
    let setup = prepare(&data, &fit_cfg)?;

    let (fit, protocol) = match cfg.mode {
        Some(mode) => {
            let pcfg = ProtocolConfig { mode, fit: fit_cfg.clone(), budget_c: cfg.budget_c()? };
            let out = run_protocol(&data.partitions, &basis, &data.dims, &setup.init, &pcfg)?;
            (out.fit, Some((out.ledger, out.budget)))
        }
        None => (run_method(&data, &setup, method, &fit_cfg)?, None),
    };

    let agg = aggregate(&compute_all(&data.partitions, &basis)?)?;
    let info = fisher_info(&agg, &fit.params.variance, &fit.params.penalty)?;
    let se = standard_errors(&info)?;
    let curves = coefficient_curves(&basis, &fit.params, &info, &curve_grid(data.dims.n_index))?;
    let metrics = evaluate(&fit, &data)?;

    let out = cfg.out_dir();
    write_fit(
        &out,
        &FitOutputs {
            fit: &fit,
            mode: cfg.mode,
            lambda: setup.cv.lambda,
            se: Some(&se),
            curves: &curves,
            metrics: Some(&metrics),
            ledger: protocol.as_ref().map(|(l, b)| (l, b)),
        },
    )?;
    say(
        cfg,
        format!(
            "{}: {} iterations, converged {}, sigma2_eps {:.4e}; reports in {}",
            method.label(),
            fit.iterations,
            fit.converged,
            fit.params.sigma2_eps(),
            out.display()
        ),
    );
    if let Some((_, budget)) = &protocol {
        say(cfg, budget.to_string());
    }
    if !fit.converged {
        eprintln!("error: {} did not converge in {} iterations", method.label(), fit.iterations);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn replication(
    spec: &ScenarioSpec,
    cfg: &RunConfig,
    methods: &[Method],
    seed: u64,
) -> Result<Vec<MetricsReport>, CliError> {
    let data = vcmm::simgen::generate(&spec.clone().with_seed(seed))?;
    let first = cfg.fit_config(methods[0])?;
    let setup = prepare(&data, &first)?;
    methods
        .iter()
        .map(|&m| {
            let mut fit_cfg = cfg.fit_config(m)?;
            fit_cfg.gibbs.seed = seed;
            let fit = run_method(&data, &setup, m, &fit_cfg)?;
            Ok(evaluate(&fit, &data)?)
        })
        .collect()
}

pub fn replicate(cfg: &RunConfig) -> Result<u8, CliError> {
    if cfg.data.is_some() {
        return Err(CliError::config("replicate simulates its own data; drop `data`"));
    }
    let methods = cfg.methods.clone().unwrap_or_else(|| vec![Method::Direct, Method::Ss]);
    if methods.is_empty() {
        return Err(CliError::config("--methods must name at least one estimator"));
    }
    let reps = cfg.reps.unwrap_or(DEFAULT_REPS);
    if reps == 0 {
        return Err(CliError::config("--reps must be at least 1"));
    }
    for &m in &methods {
        cfg.fit_config(m)?;
    }
    let spec = scenario(cfg)?;
    let runs: Vec<Vec<MetricsReport>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| replication(&spec, cfg, &methods, spec.seed + r))
        .collect::<Result<_, _>>()?;

    let table = write_table(&cfg.out_dir(), &methods, &runs)?;
    say(cfg, table);
    let failed = runs.iter().flatten().filter(|m| !m.converged).count();
    if failed > 0 {
        eprintln!("error: {failed} fits did not converge");
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn describe_partition(part: &Partition) -> String {
    let n = part.n_rows();
    let mean = if n > 0 { part.y.sum() / n as f64 } else { f64::NAN };
    format!(
        "partition: {}\nrows: {n}\ncovariates: {}\nindex_dims: {}\nrandom_effects: {}\nmean_y: {mean:.6e}\n",
        part.id,
        part.x.ncols(),
        part.h.ncols(),
        part.z.ncols()
    )
}

pub fn inspect(path: &Path) -> Result<u8, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let text = if bytes.starts_with(&MAGIC) {
        describe(&deserialize(&bytes)?)
    } else if bytes.starts_with(&PARTITION_MAGIC) {
        describe_partition(&read_partition_bin(path)?)
    } else if path.extension().is_some_and(|e| e == "csv") {
        describe_partition(&read_partition_csv(path, 0)?)
    } else if let Ok(m) = serde_json::from_slice::<Manifest>(&bytes) {
        format!(
            "manifest: example {} seed {}\nrows: {} (training {})\npartitions: {}\nformat: {}\nparameters: {}\n",
            m.spec.example,
            m.spec.seed,
            m.spec.n,
            m.dims.n_obs,
            m.partitions.len(),
            m.format.extension(),
            m.dims.param_len()
        )
    } else if let Ok(t) = serde_json::from_slice::<Truth>(&bytes) {
        format!(
            "truth: example {}\nbeta0: {}\nsigma2_eps: {}\nrandom_effects: {}\n",
            t.example,
            t.beta0,
            t.sigma2_eps,
            t.alpha.len()
        )
    } else {
        return Err(CliError::config(format!("{}: unrecognized file", path.display())));
    };
    print!("{text}");
    Ok(0)
}
