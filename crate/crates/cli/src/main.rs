//! `vcmm`: generate simulated partitions, fit them in-process or through the
//! simulated node protocol, replicate scenarios and inspect files.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 the estimator
//! did not converge (reports are still written), 4 numerical failure.

mod commands;
mod config;
mod dataset;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcmm::distrib::ProtocolMode;
use vcmm::estimator::Method;
use vcmm::VcmmError;

use config::{FileFormat, RunConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<VcmmError> for CliError {
    fn from(e: VcmmError) -> Self {
        let code = match e {
            VcmmError::NonFinite(_)
            | VcmmError::NonPositiveVariance(_)
            | VcmmError::Singular { .. }
            | VcmmError::NotSymmetric(_)
            | VcmmError::NegativeVariance(_)
            | VcmmError::WorkerFailed(..) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "vcmm", version, about = "Distributed varying coefficient mixed model estimation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "VCMM_OUT")]
    out: Option<PathBuf>,
    /// Suppress progress output on stdout.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scenario and write partition files, a test split and the truth.
    Generate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Partition file format.
        #[arg(long, value_parser = parse_format)]
        format: Option<FileFormat>,
    },
    /// Fit one estimator and write reports.
    Fit {
        /// Manifest written by `generate`, or its directory.
        #[arg(long, conflicts_with = "example")]
        data: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Estimator: direct, ss, svd, onestep or gibbs.
        #[arg(long)]
        method: Option<Method>,
        /// Run through the node protocol: summary or onestep.
        #[arg(long)]
        mode: Option<ProtocolMode>,
        /// Budget constant c in the per-node cap c * d.
        #[arg(long)]
        budget_c: Option<f64>,
    },
    /// Repeat a scenario over seeds and tabulate mean (sd) per method.
    Replicate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Comma-separated estimators.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Describe a wire message, partition file, manifest or truth file.
    Inspect { path: PathBuf },
}

#[derive(Args, Debug, Default)]
struct ScenarioArgs {
    /// Simulation example, 1 to 4.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    example: Option<u8>,
    /// Total rows including the test split.
    #[arg(long)]
    n: Option<usize>,
    /// Number of training partitions.
    #[arg(long)]
    k: Option<usize>,
    /// Total random-effect levels.
    #[arg(long)]
    q: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct FitArgs {
    /// Spectral mode: `full`, a relative threshold, or `rank:<r>`.
    #[arg(long)]
    svd: Option<String>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol_grad: Option<f64>,
    #[arg(long)]
    tol_param: Option<f64>,
}

fn parse_format(s: &str) -> Result<FileFormat, String> {
    match s {
        "csv" => Ok(FileFormat::Csv),
        "vcmp" => Ok(FileFormat::Vcmp),
        other => Err(format!("expected csv or vcmp, got `{other}`")),
    }
}

impl Cli {
    fn flag_config(&self) -> RunConfig {
        let mut flags = RunConfig {
            seed: self.seed,
            out: self.out.clone(),
            quiet: self.quiet.then_some(true),
            ..Default::default()
        };
        let scenario = |flags: &mut RunConfig, s: &ScenarioArgs| {
            flags.example = s.example;
            flags.n = s.n;
            flags.k = s.k;
            flags.q = s.q;
        };
        let fit_args = |flags: &mut RunConfig, f: &FitArgs| {
            flags.svd = f.svd.clone();
            flags.max_iter = f.max_iter;
            flags.tol_grad = f.tol_grad;
            flags.tol_param = f.tol_param;
        };
        match &self.command {
            Command::Generate { scenario: s, format } => {
                scenario(&mut flags, s);
                flags.format = *format;
            }
            Command::Fit { data, scenario: s, fit, method, mode, budget_c } => {
                scenario(&mut flags, s);
                fit_args(&mut flags, fit);
                flags.data = data.clone();
                flags.method = *method;
                flags.mode = *mode;
                flags.budget_c = *budget_c;
            }
            Command::Replicate { scenario: s, fit, methods, reps } => {
                scenario(&mut flags, s);
                fit_args(&mut flags, fit);
                flags.methods = methods.clone();
                flags.reps = *reps;
            }
            Command::Inspect { .. } => {}
        }
        flags
    }
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.overlay(cli.flag_config());
    let level = if cfg.quiet == Some(true) { "error" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match &cli.command {
        Command::Generate { .. } => commands::generate(&cfg),
        Command::Fit { .. } => commands::fit(&cfg),
        Command::Replicate { .. } => commands::replicate(&cfg),
        Command::Inspect { path } => commands::inspect(path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_flag_has_a_config_key() {
        let full = RunConfig {
            seed: Some(1),
            out: Some("o".into()),
            quiet: Some(true),
            example: Some(1),
            n: Some(1),
            k: Some(1),
            q: Some(1),
            format: Some(FileFormat::Csv),
            data: Some("d".into()),
            method: Some(Method::Ss),
            methods: Some(vec![Method::Ss]),
            mode: Some(ProtocolMode::Summary),
            budget_c: Some(1.0),
            svd: Some("full".into()),
            reps: Some(1),
            max_iter: Some(1),
            tol_grad: Some(1.0),
            tol_param: Some(1.0),
            fit: Some(Default::default()),
        };
        let table: toml::Table = toml::from_str(&toml::to_string(&full).unwrap()).unwrap();
        let cmd = Cli::command();
        let subs = cmd.get_subcommands().collect::<Vec<_>>();
        assert_eq!(subs.len(), 4);
        for sub in std::iter::once(&cmd).chain(subs) {
            for arg in sub.get_arguments() {
                let Some(long) = arg.get_long() else { continue };
                if matches!(long, "config" | "help" | "version") {
                    continue;
                }
                assert!(table.contains_key(&long.replace('-', "_")), "--{long} has no config key");
            }
        }
    }

    #[test]
    fn numerical_errors_map_to_exit_4() {
        assert_eq!(CliError::from(VcmmError::NonPositiveVariance(0.0)).code, EXIT_NUMERICAL);
        assert_eq!(CliError::from(VcmmError::InvalidSpec("x".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(VcmmError::Checksum { stored: 0, computed: 1 }).code, EXIT_CONFIG);
    }
}
