//! Writes results.csv, per-check reports and the manifest that ties them to
//! the producing config hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiments::{ExperimentOutput, ResultRow, SCHEMA_VERSION};
use crate::error::{invalid, Result};
use crate::theory::CheckReport;

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    /// Wall time per grid cell, keyed "seed/input/tau/rho". Kept out of the
    /// CSV so reruns produce identical bytes.
    pub timings_ms: BTreeMap<String, f64>,
    pub failures: Vec<super::experiments::SeedFailure>,
}

/// Creates `dir` if needed and checks that it accepts writes.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

pub fn write_results_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "schema_version", "experiment", "config_hash", "seed", "input", "t", "estimator", "tau", "rho",
            "frob_error", "eps_bar", "lambda_emp", "nu", "converged", "iters",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<ResultRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    if let Some(bad) = rows.iter().find(|row| row.schema_version != SCHEMA_VERSION) {
        return Err(invalid(format!("unsupported schema_version {}", bad.schema_version)));
    }
    Ok(rows)
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn artifact(dir: &Path, name: &str, hash: &str) -> Result<Artifact> {
    Ok(Artifact {
        path: name.into(),
        sha256: sha256_file(&dir.join(name))?,
        config_hash: hash.into(),
    })
}

fn write_check(dir: &Path, report: &CheckReport, hash: &str) -> Result<String> {
    let name = format!("check_{}.json", report.check_name);
    let mut value = serde_json::to_value(report)?;
    value["config_hash"] = hash.into();
    fs::write(dir.join(&name), serde_json::to_string_pretty(&value)?)?;
    Ok(name)
}

/// Writes one JSON file per check plus any extra JSON documents, and returns
/// the written file names.
pub fn write_reports(
    dir: &Path,
    checks: &[CheckReport],
    extra: &[(&str, serde_json::Value)],
    hash: &str,
) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for report in checks {
        names.push(write_check(dir, report, hash)?);
    }
    for (name, value) in extra {
        let mut value = value.clone();
        if let Some(obj) = value.as_object_mut() {
            obj.insert("config_hash".into(), hash.into());
        }
        fs::write(dir.join(name), serde_json::to_string_pretty(&value)?)?;
        names.push((*name).to_string());
    }
    Ok(names)
}

/// Writes the manifest listing `files` (already present in `dir`).
pub fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    files: &[String],
    output: Option<&ExperimentOutput>,
) -> Result<PathBuf> {
    let hash = cfg.short_hash();
    let artifacts = files.iter().map(|f| artifact(dir, f, &hash)).collect::<Result<Vec<_>>>()?;
    let mut config = serde_json::to_value(cfg)?;
    if let Some(obj) = config.as_object_mut() {
        obj.remove("output_dir");
    }
    let timings_ms = output
        .map(|o| {
            o.cell_ms
                .iter()
                .map(|(seed, input, tau, rho, ms)| (format!("{seed}/{input}/{tau}/{rho}"), *ms))
                .collect()
        })
        .unwrap_or_default();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment.name().into(),
        config_hash: hash,
        config,
        artifacts,
        timings_ms,
        failures: output.map(|o| o.failures.clone()).unwrap_or_default(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// results.csv, a summary JSON, and the manifest for a grid experiment.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, output: &ExperimentOutput) -> Result<Vec<String>> {
    prepare_output_dir(dir)?;
    let hash = cfg.short_hash();
    write_results_csv(&output.rows, fs::File::create(dir.join(RESULTS_FILE))?)?;
    let mut files = vec![RESULTS_FILE.to_string()];
    files.extend(write_reports(
        dir,
        &[],
        &[("summary.json", serde_json::json!({ "groups": output.summary }))],
        &hash,
    )?);
    write_manifest(dir, cfg, &files, Some(output))?;
    Ok(files)
}

/// Checks that every artifact in the manifest exists, matches its digest and
/// carries the manifest's config hash.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    for a in &manifest.artifacts {
        if a.config_hash != manifest.config_hash {
            return Err(invalid(format!("{} carries hash {}", a.path, a.config_hash)));
        }
        let path = dir.join(&a.path);
        if sha256_file(&path)? != a.sha256 {
            return Err(invalid(format!("{} does not match its recorded digest", a.path)));
        }
        if a.path == RESULTS_FILE {
            if read_results_csv(&path)?.iter().any(|r| r.config_hash != manifest.config_hash) {
                return Err(invalid(format!("{} has rows from another config", a.path)));
            }
        } else if a.path.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if v.get("config_hash").and_then(|h| h.as_str()) != Some(manifest.config_hash.as_str()) {
                return Err(invalid(format!("{} lacks the config hash", a.path)));
            }
        }
    }
    Ok(manifest)
}
