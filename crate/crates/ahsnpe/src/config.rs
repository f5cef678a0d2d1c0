//! JSON-facing configuration schema. Every block except the model has
//! defaults, so a minimal file is `{"model": {"n_nodes": 12}}`. Matrices are
//! row-major nested arrays. Unknown fields are rejected so typos fail
//! loudly instead of silently falling back to defaults.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::driver::Schedule;
use crate::error::{Error, Result};
use crate::flow::{EstimatorSpec, TrainConfig};
use crate::niw::NiwHyper;
use crate::sim::{ErgmModel, Proposal, SimConfig};
use crate::stats::Term;

pub fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>], context: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::InvalidConfig(format!("{context}: matrix must be non-empty")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidConfig(format!("{context}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// ERGM definition: node count, decay, and statistic terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_nodes: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_terms")]
    pub terms: Vec<Term>,
}

fn default_tau() -> f64 {
    0.75
}

fn default_terms() -> Vec<Term> {
    vec![Term::Edges, Term::Gwesp, Term::Gwnsp]
}

impl ModelConfig {
    pub fn to_model(&self) -> Result<ErgmModel> {
        if self.n_nodes < 2 {
            return Err(Error::InvalidConfig(format!(
                "model needs at least 2 nodes, got {}",
                self.n_nodes
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be finite and positive, got {}",
                self.tau
            )));
        }
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one term".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.terms {
            if !seen.insert(*t) {
                return Err(Error::InvalidConfig(format!("duplicate model term {t:?}")));
            }
        }
        Ok(ErgmModel { n_nodes: self.n_nodes, tau: self.tau, terms: self.terms.clone() })
    }
}

/// Sampler overrides; anything omitted uses the dyad-scaled defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimTuningConfig {
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub proposal: Option<Proposal>,
}

impl SimTuningConfig {
    pub fn to_sim_config(&self, n_nodes: usize, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::defaults(n_nodes, seed);
        if let Some(b) = self.burn_in {
            cfg.burn_in = b;
        }
        if let Some(t) = self.thin {
            cfg.thin = t;
        }
        if let Some(p) = self.proposal {
            cfg.proposal = p;
        }
        cfg
    }
}

/// Normal-inverse-Wishart hyper-prior parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NiwConfig {
    pub mu0: Vec<f64>,
    pub kappa0: f64,
    pub psi0: Vec<Vec<f64>>,
    pub nu0: f64,
}

impl NiwConfig {
    /// Documented default: mu0 = 0, kappa0 = 1, Psi0 = d*I, nu0 = d+2.
    /// These are not taken from any published analysis; real runs should
    /// set their own.
    pub fn weakly_informative(d: usize) -> Self {
        NiwConfig::from_hyper(&NiwHyper::weakly_informative(d))
    }

    pub fn from_hyper(h: &NiwHyper) -> Self {
        NiwConfig {
            mu0: h.mu0().iter().copied().collect(),
            kappa0: h.kappa0(),
            psi0: rows_from_matrix(h.psi0()),
            nu0: h.nu0(),
        }
    }

    pub fn to_hyper(&self) -> Result<NiwHyper> {
        NiwHyper::new(
            DVector::from_vec(self.mu0.clone()),
            self.kappa0,
            matrix_from_rows(&self.psi0, "niw psi0")?,
            self.nu0,
        )
    }
}

/// Sampling schedule and estimator sizes; defaults are the production
/// constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_initial: usize,
    pub n1: usize,
    pub nt: usize,
    pub n_refined: usize,
    pub cov_inflation: f64,
    /// Defaults to the zero vector.
    pub initial_mean: Option<Vec<f64>>,
    /// Defaults to 10 I.
    pub initial_cov: Option<Vec<Vec<f64>>>,
    pub burn_in_hidden: usize,
    pub burn_in_transforms: usize,
    pub main_hidden: usize,
    pub main_transforms: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_initial: 4,
            n1: 100_000,
            nt: 20_000,
            n_refined: 50_000,
            cov_inflation: 5.0,
            initial_mean: None,
            initial_cov: None,
            burn_in_hidden: 32,
            burn_in_transforms: 5,
            main_hidden: 64,
            main_transforms: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn to_schedule(&self, theta_dim: usize, context_dim: usize) -> Result<Schedule> {
        let initial_mean = match &self.initial_mean {
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(theta_dim),
        };
        let initial_cov = match &self.initial_cov {
            Some(rows) => matrix_from_rows(rows, "schedule initial_cov")?,
            None => DMatrix::identity(theta_dim, theta_dim) * 10.0,
        };
        let schedule = Schedule {
            t_initial: self.t_initial,
            n1: self.n1,
            nt: self.nt,
            n_refined: self.n_refined,
            cov_inflation: self.cov_inflation,
            initial_mean,
            initial_cov,
            burn_in_spec: EstimatorSpec::maf(
                self.burn_in_transforms,
                self.burn_in_hidden,
                theta_dim,
                context_dim,
            ),
            main_spec: EstimatorSpec::maf(
                self.main_transforms,
                self.main_hidden,
                theta_dim,
                context_dim,
            ),
        };
        schedule.validate(theta_dim, context_dim)?;
        Ok(schedule)
    }
}

/// Training overrides; the seed always comes from the run, not the file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainTuningConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub n_atoms: usize,
}

impl Default for TrainTuningConfig {
    fn default() -> Self {
        let t = TrainConfig::new(0);
        TrainTuningConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            n_atoms: t.n_atoms,
        }
    }
}

impl TrainTuningConfig {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            n_atoms: self.n_atoms,
            seed,
        }
    }
}

/// Random-walk exchange sampler settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExchangeTuningConfig {
    pub n_iters: usize,
    /// Random-walk covariance; defaults to 0.01 I.
    pub rw_cov: Option<Vec<Vec<f64>>>,
    /// Draws discarded from the front when thinning a chain for output.
    pub burn: usize,
    pub thin: usize,
}

impl Default for ExchangeTuningConfig {
    fn default() -> Self {
        ExchangeTuningConfig { n_iters: 10_000, rw_cov: None, burn: 0, thin: 1 }
    }
}

/// Top-level config file. Each subcommand reads the blocks it needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    /// Defaults to the documented weakly-informative hyper-prior for the
    /// model's dimension.
    #[serde(default)]
    pub niw: Option<NiwConfig>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainTuningConfig,
    #[serde(default)]
    pub sim: SimTuningConfig,
    #[serde(default)]
    pub exchange: ExchangeTuningConfig,
    #[serde(default = "default_s_moments")]
    pub s_moments: usize,
    /// Posterior draws per observation for the final reported samples,
    /// larger than the inner-loop `s_moments` because these back the
    /// published summaries.
    #[serde(default = "default_s_report")]
    pub s_report: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    /// Average-degree target for binarising weighted inputs; required only
    /// when the data directory contains weighted matrices.
    #[serde(default)]
    pub target_avg_degree: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_s_moments() -> usize {
    10_000
}

fn default_s_report() -> usize {
    100_000
}

fn default_max_rounds() -> usize {
    30
}

impl ConfigFile {
    pub fn niw_hyper(&self) -> Result<NiwHyper> {
        match &self.niw {
            Some(c) => {
                let h = c.to_hyper()?;
                if h.dim() != self.model.terms.len() {
                    return Err(Error::DimMismatch {
                        expected: self.model.terms.len(),
                        got: h.dim(),
                        context: "niw block vs model terms".into(),
                    });
                }
                Ok(h)
            }
            None => Ok(NiwHyper::weakly_informative(self.model.terms.len())),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

pub fn parse_config(text: &str, context: &str) -> Result<ConfigFile> {
    let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.to_string(),
        message: e.to_string(),
    })?;
    cfg.model.to_model()?;
    Ok(cfg)
}

/// SHA-256 of the raw config text, recorded in run manifests so results can
/// be traced to the exact configuration that produced them.
pub fn config_digest(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
