//! `ahsnpe report`: renders the CSV tables and SVG plots for a finished run
//! directory, folding in predictive-check output from `diagnose` when
//! present.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args as ClapArgs;
use nalgebra::DMatrix;

use ahsnpe::diagnostics::{summarize, PosteriorSummary};
use ahsnpe::report::{emit_reports, ReportInputs};

use crate::artifacts::{load_history, load_ppc, Manifest, RunDir};
use crate::context::Shared;
use crate::csvio;

#[derive(ClapArgs)]
pub struct Args {
    /// Run directory produced by fit-ahsnpe.
    #[arg(long)]
    pub run: PathBuf,

    /// CSV of reference posterior draws; adds a per-round Mahalanobis
    /// distance column to the convergence table.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

pub fn run(args: &Args, shared: &Shared) -> Result<()> {
    let run_dir = RunDir::new(&args.run);
    let history = load_history(&run_dir.history()).with_context(|| {
        format!("loading {}; is this a fit-ahsnpe run directory?", run_dir.history().display())
    })?;

    let group_samples: Option<DMatrix<f64>> = if run_dir.group_theta_samples().exists() {
        Some(csvio::read_matrix(&run_dir.group_theta_samples())?.1)
    } else {
        None
    };

    let mut local_summaries: Vec<PosteriorSummary> = Vec::new();
    for i in 0.. {
        let path = run_dir.observation_samples(i);
        if !path.exists() {
            break;
        }
        let (_, samples) = csvio::read_matrix(&path)?;
        local_summaries.push(summarize(&samples)?);
    }

    let ppc = if run_dir.ppc_json().exists() {
        load_ppc(&run_dir.ppc_json())?
    } else {
        Vec::new()
    };

    let reference: Option<DMatrix<f64>> = match &args.reference {
        Some(p) => Some(csvio::read_matrix(p)?.1),
        None => None,
    };

    let sigma_g_map = history.last().map(|r| r.sigma_g.clone());

    let inputs = ReportInputs {
        history: &history,
        group_samples: group_samples.as_ref(),
        local_summaries: &local_summaries,
        ppc: &ppc,
        reference_samples: reference.as_ref(),
        sigma_g_map: sigma_g_map.as_ref(),
    };
    let written = emit_reports(&inputs, &run_dir.report())?;

    let seed = shared.seed.unwrap_or(0);
    let mut manifest = Manifest::new("report", seed, None);
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    manifest
        .insert("run", serde_json::json!(args.run.display().to_string()))
        .insert("files", serde_json::json!(names));
    manifest.write(&run_dir.report())?;

    println!("wrote {} report files to {}", written.len(), run_dir.report().display());
    Ok(())
}
