//! `ahsnpe fit-ahsnpe`: the amortised hierarchical fit. Produces a run
//! directory with per-round checkpoints, the merged round history, the
//! final estimator, observed statistics, and posterior-sample CSVs for
//! every observation and for the group parameters.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ahsnpe::driver::{self, stream_seed, ErgmSimulator, RunConfig, RunOutput};
use ahsnpe::stats::{summary_stats, ALL_TERMS};

use crate::artifacts::{load_history, save_history, Manifest, RunDir};
use crate::context::{load_network_dir, Shared};
use crate::csvio;

/// Salt families for the reporting RNG streams, disjoint from the salts the
/// fitting rounds use internally.
const OBSERVATION_SAMPLES_SALT: u64 = 8 << 32;
const GROUP_SAMPLES_SALT: u64 = 9 << 32;

#[derive(ClapArgs)]
pub struct Args {
    /// Directory of network files, one per subject, read in name order.
    #[arg(long)]
    pub data: PathBuf,

    /// Run directory for all outputs.
    #[arg(long)]
    pub out: PathBuf,

    /// Continue from the latest checkpoint in the run directory instead of
    /// starting over.
    #[arg(long)]
    pub resume: bool,
}

pub fn run(args: &Args, shared: &Shared) -> Result<()> {
    let Some(cfg) = shared.config()? else {
        bail!("fit-ahsnpe requires --config (or AHSNPE_CONFIG)");
    };
    let seed = shared.resolve_seed(Some(&cfg.file));
    let (names, graphs) = load_network_dir(&args.data, cfg.file.target_avg_degree)?;
    let model = cfg.file.model.to_model()?;
    if model.n_nodes != graphs[0].n_nodes() {
        bail!("config declares {} nodes but the data has {}", model.n_nodes, graphs[0].n_nodes());
    }
    let d = model.dim();

    let run_dir = RunDir::new(&args.out);
    fs::create_dir_all(run_dir.samples())?;

    // Driver inputs: the selected statistics of each observed network.
    let observations: Vec<DVector<f64>> = graphs.iter().map(|g| model.stats_vector(g)).collect();
    let niw = cfg.file.niw_hyper()?;
    let schedule = cfg.file.schedule.to_schedule(d, d)?;
    let run_cfg = RunConfig {
        train: cfg.file.train.to_train_config(seed),
        s_moments: cfg.file.s_moments,
        max_rounds: cfg.file.max_rounds,
        seed,
        checkpoint_dir: Some(run_dir.checkpoints()),
    };
    let sim_base = cfg.file.sim.to_sim_config(model.n_nodes, seed);
    let simulator = ErgmSimulator::new(model.clone(), sim_base);

    let resuming = args.resume && has_checkpoints(&run_dir);
    let output: RunOutput = if resuming {
        driver::resume(&simulator, &observations, &niw, &schedule, &run_cfg, &run_dir.checkpoints())?
    } else {
        driver::run(&simulator, &observations, &niw, &schedule, &run_cfg)?
    };

    // Merge the continued rounds into any history from earlier invocations.
    let mut history = if resuming && run_dir.history().exists() {
        load_history(&run_dir.history())?
    } else {
        Vec::new()
    };
    let cutoff = history.last().map_or(0, |r| r.round);
    history.extend(output.history.iter().filter(|r| r.round > cutoff).cloned());
    if history.is_empty() {
        bail!("the run produced no rounds");
    }
    save_history(&run_dir.history(), &history)?;

    fs::write(run_dir.config(), &cfg.text).context("copying config into the run directory")?;
    output.estimator.save(&run_dir.estimator())?;

    // Full statistics triple per observation; diagnostics reconstructs the
    // observed summaries from this file without re-reading the data.
    let full = DMatrix::from_fn(graphs.len(), 3, |i, j| {
        summary_stats(&graphs[i], model.tau).to_vector()[j]
    });
    let full_header: Vec<String> = ALL_TERMS.iter().map(|t| t.name().to_string()).collect();
    csvio::write_matrix(&run_dir.observed_stats(), &full_header, &full)?;

    // Posterior samples: per observation from the amortised estimator, and
    // for the group parameters from the final NIW posterior.
    let s_report = cfg.file.s_report;
    let theta_header = csvio::indexed_header("theta", d);
    for (i, x) in observations.iter().enumerate() {
        let mut rng =
            ChaCha12Rng::seed_from_u64(stream_seed(seed, OBSERVATION_SAMPLES_SALT | i as u64));
        let draws = output.estimator.sample(x, s_report, &mut rng)?;
        csvio::write_matrix(&run_dir.observation_samples(i), &theta_header, &draws)?;
    }

    let posterior = &history.last().expect("nonempty history").posterior;
    let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, GROUP_SAMPLES_SALT));
    let mut theta_draws = DMatrix::zeros(s_report, d);
    let mut sigma_draws = DMatrix::zeros(s_report, d * d);
    for s in 0..s_report {
        let (theta, sigma) = posterior.sample(&mut rng)?;
        theta_draws.row_mut(s).copy_from(&theta.transpose());
        for k in 0..d * d {
            sigma_draws[(s, k)] = sigma[(k / d, k % d)];
        }
    }
    csvio::write_matrix(&run_dir.group_theta_samples(), &theta_header, &theta_draws)?;
    csvio::write_matrix(&run_dir.group_sigma_samples(), &csvio::square_header("sigma", d), &sigma_draws)?;

    let mut manifest = Manifest::new("fit-ahsnpe", seed, Some(cfg.digest.clone()));
    manifest
        .insert("data", serde_json::json!(args.data.display().to_string()))
        .insert("networks", serde_json::json!(names))
        .insert("n_observations", serde_json::json!(observations.len()))
        .insert("rounds_total", serde_json::json!(history.len()))
        .insert("rounds_this_invocation", serde_json::json!(output.history.len()))
        .insert("converged", serde_json::json!(output.converged))
        .insert("sim_count", serde_json::json!(output.manifest.sim_count))
        .insert("stage_seconds", serde_json::to_value(output.manifest.stage_seconds)?)
        .insert("s_report", serde_json::json!(s_report));
    manifest.write(&run_dir.root)?;

    let last = history.last().expect("nonempty history");
    let theta_str: Vec<String> = last.theta_g.iter().map(|v| format!("{v:.4}")).collect();
    println!(
        "{} after {} rounds; theta_g = [{}]",
        if output.converged { "converged" } else { "stopped" },
        history.len(),
        theta_str.join(", ")
    );
    Ok(())
}

fn has_checkpoints(run_dir: &RunDir) -> bool {
    let Ok(entries) = fs::read_dir(run_dir.checkpoints()) else {
        return false;
    };
    entries.filter_map(|e| e.ok()).any(|e| {
        let name = e.file_name();
        let name = name.to_string_lossy();
        name.starts_with("round_") && name.ends_with(".json")
    })
}
