//! Run-directory layout and JSON artifact round-trips. Every subcommand
//! writes its outputs under a directory holding a `manifest.json` that
//! records the tool version, the seed, and the hash of the configuration
//! used, so results stay traceable to their inputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ahsnpe::config::{matrix_from_rows, rows_from_matrix};
use ahsnpe::diagnostics::PpcResult;
use ahsnpe::driver::{RoundRecord, StageTimes};
use ahsnpe::flow::FitReport;
use ahsnpe::niw::NiwHyper;
use nalgebra::DVector;

/// Contents of `manifest.json`. `extra` carries subcommand-specific fields
/// (counts, acceptance rates, stage timers).
#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub seed: u64,
    /// SHA-256 of the raw config text; None when no config file was used.
    pub config_digest: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(subcommand: &'static str, seed: u64, config_digest: Option<String>) -> Self {
        Manifest {
            tool: "ahsnpe",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            config_digest,
            extra: serde_json::Map::new(),
        }
    }

    pub fn insert(&mut self, key: &str, value: serde_json::Value) -> &mut Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    /// Writes `manifest.json` in `dir`, creating the directory if needed.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Fixed file layout of a fit run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn observed_stats(&self) -> PathBuf {
        self.root.join("observed_stats.csv")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.json")
    }

    pub fn estimator(&self) -> PathBuf {
        self.root.join("estimator.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn observation_samples(&self, i: usize) -> PathBuf {
        self.samples().join(format!("observation_{i}.csv"))
    }

    pub fn group_theta_samples(&self) -> PathBuf {
        self.samples().join("group_theta.csv")
    }

    pub fn group_sigma_samples(&self) -> PathBuf {
        self.samples().join("group_sigma.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }

    pub fn ppc_json(&self) -> PathBuf {
        self.diagnostics().join("ppc.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Serialize, Deserialize)]
struct NiwDto {
    mu0: Vec<f64>,
    kappa0: f64,
    psi0: Vec<Vec<f64>>,
    nu0: f64,
}

impl NiwDto {
    fn from_hyper(h: &NiwHyper) -> Self {
        NiwDto {
            mu0: h.mu0().iter().copied().collect(),
            kappa0: h.kappa0(),
            psi0: rows_from_matrix(h.psi0()),
            nu0: h.nu0(),
        }
    }

    fn to_hyper(&self) -> Result<NiwHyper> {
        let psi0 = matrix_from_rows(&self.psi0, "history psi0")?;
        Ok(NiwHyper::new(DVector::from_vec(self.mu0.clone()), self.kappa0, psi0, self.nu0)?)
    }
}

#[derive(Serialize, Deserialize)]
struct RoundRecordDto {
    round: usize,
    theta_g: Vec<f64>,
    sigma_g: Vec<Vec<f64>>,
    posterior: NiwDto,
    rel_change: Option<f64>,
    stage_seconds: StageTimes,
    dataset_size: usize,
    fit: FitReport,
}

impl RoundRecordDto {
    fn from_record(r: &RoundRecord) -> Self {
        RoundRecordDto {
            round: r.round,
            theta_g: r.theta_g.iter().copied().collect(),
            sigma_g: rows_from_matrix(&r.sigma_g),
            posterior: NiwDto::from_hyper(&r.posterior),
            rel_change: r.rel_change,
            stage_seconds: r.stage_seconds,
            dataset_size: r.dataset_size,
            fit: r.fit.clone(),
        }
    }

    fn to_record(&self) -> Result<RoundRecord> {
        Ok(RoundRecord {
            round: self.round,
            theta_g: DVector::from_vec(self.theta_g.clone()),
            sigma_g: matrix_from_rows(&self.sigma_g, "history sigma_g")?,
            posterior: self.posterior.to_hyper()?,
            rel_change: self.rel_change,
            stage_seconds: self.stage_seconds,
            dataset_size: self.dataset_size,
            fit: self.fit.clone(),
        })
    }
}

/// Writes the round history as JSON; resumed runs append to the existing
/// history via [`load_history`] first.
pub fn save_history(path: &Path, history: &[RoundRecord]) -> Result<()> {
    let dtos: Vec<RoundRecordDto> = history.iter().map(RoundRecordDto::from_record).collect();
    let text = serde_json::to_string_pretty(&dtos).context("serializing history")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_history(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let dtos: Vec<RoundRecordDto> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    dtos.iter().map(RoundRecordDto::to_record).collect()
}

#[derive(Serialize, Deserialize)]
struct PpcDto {
    observed: Vec<f64>,
    predictive_mean: Vec<f64>,
    predictive_sd: Option<Vec<f64>>,
    z_scores: Option<Vec<f64>>,
    n_draws: usize,
}

pub fn save_ppc(path: &Path, results: &[PpcResult]) -> Result<()> {
    let dtos: Vec<PpcDto> = results
        .iter()
        .map(|r| PpcDto {
            observed: r.observed.iter().copied().collect(),
            predictive_mean: r.predictive_mean.iter().copied().collect(),
            predictive_sd: r.predictive_sd.as_ref().map(|v| v.iter().copied().collect()),
            z_scores: r.z_scores.as_ref().map(|v| v.iter().copied().collect()),
            n_draws: r.n_draws,
        })
        .collect();
    let text = serde_json::to_string_pretty(&dtos).context("serializing predictive checks")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_ppc(path: &Path) -> Result<Vec<PpcResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let dtos: Vec<PpcDto> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(dtos
        .into_iter()
        .map(|d| PpcResult {
            observed: DVector::from_vec(d.observed),
            predictive_mean: DVector::from_vec(d.predictive_mean),
            predictive_sd: d.predictive_sd.map(DVector::from_vec),
            z_scores: d.z_scores.map(DVector::from_vec),
            n_draws: d.n_draws,
        })
        .collect())
}
