//! Dataset manifests: the files written by `generate` and read back by `fit`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcmm::io::{read_json, read_partition, write_json, write_partition_bin, write_partition_csv};
use vcmm::model::{ModelDims, Partition};
use vcmm::simgen::{generate, Dataset, ScenarioSpec, Truth};
use vcmm::spline::BasisSpec;

use crate::config::{FileFormat, RunConfig};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const TRUTH: &str = "truth.json";
const TEST_ID: u32 = u32::MAX;

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: ScenarioSpec,
    pub basis: BasisSpec,
    pub dims: ModelDims,
    pub format: FileFormat,
    pub partitions: Vec<String>,
    pub test: String,
    pub truth: String,
}

pub fn scenario(cfg: &RunConfig) -> Result<ScenarioSpec, CliError> {
    let example = cfg.example.unwrap_or(1);
    let mut spec = ScenarioSpec::example(example).map_err(|e| CliError::config(format!("--example: {e}")))?;
    if let Some(seed) = cfg.seed {
        spec = spec.with_seed(seed);
    }
    if let Some(n) = cfg.n {
        spec = spec.with_n(n);
    }
    if let Some(k) = cfg.k {
        spec = spec.with_k(k);
    }
    if let Some(q) = cfg.q {
        spec = spec.with_q(q);
    }
    spec.validate().map_err(|e| CliError::config(format!("scenario: {e}")))?;
    Ok(spec)
}

fn write_part(path: &Path, part: &Partition, format: FileFormat) -> Result<(), CliError> {
    match format {
        FileFormat::Csv => write_partition_csv(path, part)?,
        FileFormat::Vcmp => write_partition_bin(path, part)?,
    }
    Ok(())
}

/// Writes partitions, the test split, the truth and the manifest; returns
/// the written paths.
pub fn write_dataset(dir: &Path, data: &Dataset, format: FileFormat) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::config(format!("--out: cannot create {}: {e}", dir.display())))?;
    let ext = format.extension();
    let mut written = Vec::new();
    let mut names = Vec::new();
    for part in &data.partitions {
        let name = format!("part_{:03}.{ext}", part.id);
        write_part(&dir.join(&name), part, format)?;
        written.push(dir.join(&name));
        names.push(name);
    }
    let test = format!("test.{ext}");
    write_part(&dir.join(&test), &data.test, format)?;
    written.push(dir.join(&test));
    write_json(&dir.join(TRUTH), &data.truth)?;
    written.push(dir.join(TRUTH));
    let manifest = Manifest {
        spec: data.spec.clone(),
        basis: data.basis_spec.clone(),
        dims: data.dims,
        format,
        partitions: names,
        test,
        truth: TRUTH.into(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    written.push(dir.join(MANIFEST));
    Ok(written)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    if !manifest_path.is_file() {
        return Err(CliError::config(format!("--data: no manifest at {}", manifest_path.display())));
    }
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest: Manifest =
        read_json(&manifest_path).map_err(|e| CliError::config(format!("--data: {}: {e}", manifest_path.display())))?;
    let partitions = manifest
        .partitions
        .iter()
        .enumerate()
        .map(|(i, name)| read_partition(&dir.join(name), i as u32))
        .collect::<vcmm::Result<Vec<_>>>()?;
    let test = read_partition(&dir.join(&manifest.test), TEST_ID)?;
    let truth: Truth = read_json(&dir.join(&manifest.truth))?;
    Ok(Dataset { spec: manifest.spec, partitions, test, truth, dims: manifest.dims, basis_spec: manifest.basis })
}

/// The dataset named by `--data`, or a fresh simulation of the scenario.
pub fn obtain(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.data {
        Some(path) => load_dataset(path),
        None => Ok(generate(&scenario(cfg)?)?),
    }
}
