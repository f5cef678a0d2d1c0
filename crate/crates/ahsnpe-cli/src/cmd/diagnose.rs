//! `ahsnpe diagnose`: posterior summaries (credible intervals), posterior
//! predictive checks, and per-round Mahalanobis distances to a reference
//! sample, all computed from a finished run directory.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use nalgebra::DMatrix;

use ahsnpe::config::parse_config;
use ahsnpe::diagnostics::{mahalanobis, posterior_predictive, summarize, PpcResult, QUANTILE_LEVELS};
use ahsnpe::driver::stream_seed;
use ahsnpe::stats::SummaryStats;

use crate::artifacts::{load_history, save_ppc, Manifest, RunDir};
use crate::context::{thin_rows, Shared};
use crate::csvio;

/// Salt family for the predictive-check simulation streams.
const PPC_SALT: u64 = 10 << 32;

#[derive(ClapArgs)]
pub struct Args {
    /// Run directory produced by fit-ahsnpe.
    #[arg(long)]
    pub run: PathBuf,

    /// CSV of reference posterior draws (for example from fit-hier-bayes);
    /// adds per-round Mahalanobis distances of theta_g to this cloud.
    #[arg(long)]
    pub reference: Option<PathBuf>,

    /// Posterior draws simulated per observation for the predictive check.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(2..))]
    pub ppc_draws: u64,
}

pub fn run(args: &Args, shared: &Shared) -> Result<()> {
    let run_dir = RunDir::new(&args.run);
    let text = fs::read_to_string(run_dir.config())
        .with_context(|| format!("reading {}; is this a fit-ahsnpe run directory?", run_dir.config().display()))?;
    let cfg = parse_config(&text, &run_dir.config().display().to_string())?;
    let seed = shared.resolve_seed(Some(&cfg));
    let model = cfg.model.to_model()?;
    let d = model.dim();

    let (full_header, full) = csvio::read_matrix(&run_dir.observed_stats())?;
    if full_header != ["edges", "gwesp", "gwnsp"] {
        bail!("{} has unexpected columns {full_header:?}", run_dir.observed_stats().display());
    }
    let history = load_history(&run_dir.history())?;
    let n_obs = full.nrows();

    let out = run_dir.diagnostics();
    fs::create_dir_all(&out)?;

    // Per-observation summaries and predictive checks.
    let mut summary_rows = Vec::new();
    let mut ppc_results: Vec<PpcResult> = Vec::new();
    for i in 0..n_obs {
        let (_, samples) = csvio::read_matrix(&run_dir.observation_samples(i))?;
        if samples.ncols() != d {
            bail!("observation {i} samples have {} columns, model has {d} terms", samples.ncols());
        }
        let summary = summarize(&samples)?;
        let mut row = vec![i as f64, summary.n_samples as f64];
        for j in 0..d {
            row.push(summary.mean[j]);
            row.extend(summary.quantiles[j]);
        }
        summary_rows.push(row);

        let observed = SummaryStats {
            edges: full[(i, 0)].round() as usize,
            gwesp: full[(i, 1)],
            gwnsp: full[(i, 2)],
            tau: model.tau,
        };
        let thinned = thin_rows(&samples, args.ppc_draws as usize);
        let sim = cfg.sim.to_sim_config(model.n_nodes, stream_seed(seed, PPC_SALT | i as u64));
        ppc_results.push(posterior_predictive(&observed, &thinned, &model, &sim)?);
    }

    let mut summary_header = vec!["observation".to_string(), "n_samples".to_string()];
    for j in 0..d {
        summary_header.push(format!("mean_{j}"));
        for q in QUANTILE_LEVELS {
            summary_header.push(format!("q{}_{j}", q * 100.0));
        }
    }
    let width = summary_header.len();
    let flat: Vec<f64> = summary_rows.into_iter().flatten().collect();
    csvio::write_matrix(
        &out.join("local_summaries.csv"),
        &summary_header,
        &DMatrix::from_row_slice(n_obs, width, &flat),
    )?;

    // One row per (observation, statistic) pair.
    let mut ppc_rows = Vec::new();
    for (i, r) in ppc_results.iter().enumerate() {
        for j in 0..r.observed.len() {
            ppc_rows.push(vec![
                i as f64,
                j as f64,
                r.observed[j],
                r.predictive_mean[j],
                r.predictive_sd.as_ref().map_or(f64::NAN, |s| s[j]),
                r.z_scores.as_ref().map_or(f64::NAN, |z| z[j]),
            ]);
        }
    }
    let ppc_header: Vec<String> =
        ["observation", "stat_index", "observed", "predictive_mean", "predictive_sd", "z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    let flat: Vec<f64> = ppc_rows.iter().flatten().copied().collect();
    csvio::write_matrix(
        &out.join("ppc.csv"),
        &ppc_header,
        &DMatrix::from_row_slice(ppc_rows.len(), 6, &flat),
    )?;
    save_ppc(&run_dir.ppc_json(), &ppc_results)?;

    // Distance of each round's group mean to the reference cloud.
    let mut n_reference = None;
    if let Some(ref_path) = &args.reference {
        let (_, reference) = csvio::read_matrix(ref_path)?;
        if reference.ncols() != d {
            bail!("reference draws have {} columns, model has {d} terms", reference.ncols());
        }
        n_reference = Some(reference.nrows());
        let rows: Vec<Vec<f64>> = history
            .iter()
            .map(|r| Ok(vec![r.round as f64, mahalanobis(&r.theta_g, &reference)?]))
            .collect::<Result<_>>()?;
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        csvio::write_matrix(
            &out.join("mahalanobis.csv"),
            &["round".to_string(), "distance".to_string()],
            &DMatrix::from_row_slice(rows.len(), 2, &flat),
        )?;
    }

    let mut manifest = Manifest::new("diagnose", seed, Some(ahsnpe::config::config_digest(&text)));
    manifest
        .insert("run", serde_json::json!(args.run.display().to_string()))
        .insert("n_observations", serde_json::json!(n_obs))
        .insert("ppc_draws", serde_json::json!(args.ppc_draws))
        .insert("reference_draws", serde_json::json!(n_reference));
    manifest.write(&out)?;

    let worst = ppc_results
        .iter()
        .filter_map(PpcResult::max_abs_z)
        .fold(0.0f64, f64::max);
    println!("diagnosed {n_obs} observations; worst predictive |z| = {worst:.3}");
    Ok(())
}
