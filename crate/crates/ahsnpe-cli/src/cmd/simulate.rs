//! `ahsnpe simulate`: independent networks at one parameter vector, written
//! as one statistics row per draw.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use nalgebra::DMatrix;

use ahsnpe::sim::{simulate_stats_batch, ErgmParams};

use crate::artifacts::Manifest;
use crate::context::{resolve_model, resolve_sim, Shared};
use crate::csvio;

#[derive(ClapArgs)]
pub struct Args {
    /// Natural parameters, comma separated, one per model term.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub theta: Vec<f64>,

    /// Node count; defaults to the config's model block.
    #[arg(long)]
    pub nodes: Option<usize>,

    /// Number of networks to draw (each from its own chain).
    #[arg(long)]
    pub draws: usize,

    /// Output CSV path; manifest.json is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &Args, shared: &Shared) -> Result<()> {
    let cfg = shared.config()?;
    let file = cfg.as_ref().map(|c| &c.file);
    let seed = shared.resolve_seed(file);
    let n_nodes = match (args.nodes, file) {
        (Some(n), _) => n,
        (None, Some(c)) => c.model.n_nodes,
        (None, None) => bail!("--nodes is required without a config file"),
    };
    let model = resolve_model(file, n_nodes)?;
    if args.theta.len() != model.dim() {
        bail!("--theta has {} entries, the model has {} terms", args.theta.len(), model.dim());
    }
    if args.draws == 0 {
        bail!("--draws must be at least 1");
    }

    let params = vec![ErgmParams::from_slice(&args.theta)?; args.draws];
    let sim = resolve_sim(file, n_nodes, seed);
    let stats = simulate_stats_batch(&model, &params, &sim);
    let table = DMatrix::from_fn(stats.len(), model.dim(), |i, j| {
        stats[i].select(&model.terms)[j]
    });

    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).map(PathBuf::from);
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let header: Vec<String> = model.terms.iter().map(|t| t.name().to_string()).collect();
    csvio::write_matrix(&args.out, &header, &table)?;

    let mut manifest = Manifest::new("simulate", seed, cfg.as_ref().map(|c| c.digest.clone()));
    manifest
        .insert("theta", serde_json::json!(args.theta))
        .insert("nodes", serde_json::json!(n_nodes))
        .insert("draws", serde_json::json!(args.draws))
        .insert("burn_in", serde_json::json!(sim.burn_in))
        .insert("thin", serde_json::json!(sim.thin))
        .insert(
            "output",
            serde_json::json!(args.out.file_name().unwrap_or_default().to_string_lossy()),
        );
    manifest.write(dir.as_deref().unwrap_or_else(|| std::path::Path::new(".")))?;

    println!("wrote {} draws to {}", args.draws, args.out.display());
    Ok(())
}
