//! Resolution of shared inputs: config file, seed precedence, thread pool,
//! and network loading with optional binarisation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;

use ahsnpe::config::{config_digest, matrix_from_rows, parse_config, ConfigFile};
use ahsnpe::exchange::ExchangeConfig;
use ahsnpe::graph::{binarise_group, read_network_file, Graph, Network};
use ahsnpe::sim::{ErgmModel, SimConfig};

/// Global flags, resolved once in `main`.
pub struct Shared {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config_path: Option<PathBuf>,
}

/// A parsed config file together with the raw text it came from; the digest
/// of the text goes into manifests.
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub digest: String,
    pub text: String,
}

impl Shared {
    /// Loads the config file when one was given.
    pub fn config(&self) -> Result<Option<LoadedConfig>> {
        let Some(path) = &self.config_path else {
            return Ok(None);
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file = parse_config(&text, &path.display().to_string())?;
        let digest = config_digest(&text);
        Ok(Some(LoadedConfig { file, digest, text }))
    }

    /// Seed precedence: --seed flag, then the config's seed, then 0.
    pub fn resolve_seed(&self, cfg: Option<&ConfigFile>) -> u64 {
        self.seed.or(cfg.map(|c| c.seed)).unwrap_or(0)
    }
}

/// Installs the global worker pool before any parallel work starts.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing the worker thread pool")?;
    }
    Ok(())
}

/// Model for a given node count: the config's model block when present
/// (whose node count must match), otherwise the standard three-term model.
pub fn resolve_model(cfg: Option<&ConfigFile>, n_nodes: usize) -> Result<ErgmModel> {
    match cfg {
        Some(c) => {
            let model = c.model.to_model()?;
            if model.n_nodes != n_nodes {
                bail!(
                    "config declares {} nodes but the data has {}",
                    model.n_nodes,
                    n_nodes
                );
            }
            Ok(model)
        }
        None => Ok(ErgmModel::standard(n_nodes)),
    }
}

/// Sampler settings: config overrides on top of node-count defaults.
pub fn resolve_sim(cfg: Option<&ConfigFile>, n_nodes: usize, seed: u64) -> SimConfig {
    match cfg {
        Some(c) => c.sim.to_sim_config(n_nodes, seed),
        None => SimConfig::defaults(n_nodes, seed),
    }
}

/// Exchange-sampler settings plus the burn/thin used when writing the
/// posterior draws.
pub fn resolve_exchange(
    cfg: Option<&ConfigFile>,
    d: usize,
    n_nodes: usize,
    seed: u64,
) -> Result<(ExchangeConfig, usize, usize)> {
    let mut ex = ExchangeConfig::defaults(d, n_nodes, seed);
    ex.aux_sim = resolve_sim(cfg, n_nodes, seed);
    let (mut burn, mut thin) = (0usize, 1usize);
    if let Some(c) = cfg {
        ex.n_iters = c.exchange.n_iters;
        if let Some(rows) = &c.exchange.rw_cov {
            let m = matrix_from_rows(rows, "exchange rw_cov")?;
            if m.nrows() != d || m.ncols() != d {
                bail!("exchange rw_cov is {}x{}, model needs {d}x{d}", m.nrows(), m.ncols());
            }
            ex.rw_cov = m;
        }
        burn = c.exchange.burn;
        thin = c.exchange.thin.max(1);
    }
    if burn >= ex.n_iters {
        bail!("exchange burn {} discards the whole chain of {} draws", burn, ex.n_iters);
    }
    Ok((ex, burn, thin))
}

/// Reads one network file, binarising weighted input at the target average
/// degree.
pub fn load_network(path: &Path, target_avg_degree: Option<f64>) -> Result<Graph> {
    let net = read_network_file(path)?;
    match net {
        Network::Binary(g) => Ok(g),
        Network::Weighted(w) => {
            let t = target_avg_degree.with_context(|| {
                format!("{} is weighted; a target average degree is required", path.display())
            })?;
            Ok(w.binarise(t)?)
        }
    }
}

/// Reads every regular file in `dir` in name order. An all-weighted group
/// is binarised jointly at the target average degree; mixing binary and
/// weighted files is rejected because the joint threshold would not apply
/// to the binary ones.
pub fn load_network_dir(dir: &Path, target_avg_degree: Option<f64>) -> Result<(Vec<String>, Vec<Graph>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{} contains no network files", dir.display());
    }
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let nets: Vec<Network> = paths
        .iter()
        .map(|p| read_network_file(p).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;

    let n_weighted = nets.iter().filter(|n| matches!(n, Network::Weighted(_))).count();
    let graphs = if n_weighted == 0 {
        nets.into_iter()
            .map(|n| match n {
                Network::Binary(g) => g,
                Network::Weighted(_) => unreachable!(),
            })
            .collect()
    } else if n_weighted == nets.len() {
        let mats = nets
            .into_iter()
            .map(|n| match n {
                Network::Weighted(w) => w,
                Network::Binary(_) => unreachable!(),
            })
            .collect::<Vec<_>>();
        let t = target_avg_degree
            .context("the networks are weighted; a target average degree is required")?;
        binarise_group(&mats, t)?
    } else {
        bail!(
            "{} mixes binary and weighted networks; binarise consistently first",
            dir.display()
        );
    };
    Ok((names, graphs))
}

/// Evenly spaced subset of `k` rows (all rows when k >= nrows), preserving
/// order.
pub fn thin_rows(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    if k == 0 || n == 0 {
        return DMatrix::zeros(0, m.ncols());
    }
    if k >= n {
        return m.clone();
    }
    let rows: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    DMatrix::from_fn(k, m.ncols(), |i, j| m[(rows[i], j)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thin_rows_keeps_order_and_bounds() {
        let m = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let t = thin_rows(&m, 4);
        assert_eq!(t.nrows(), 4);
        let vals: Vec<f64> = t.column(0).iter().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        assert!(vals.iter().all(|&v| (0.0..10.0).contains(&v)));
        assert_eq!(thin_rows(&m, 99).nrows(), 10);
    }

    #[test]
    fn seed_precedence_prefers_flag_over_config() {
        let cfg = parse_config(r#"{"model": {"n_nodes": 8}, "seed": 7}"#, "test").unwrap();
        let with_flag =
            Shared { seed: Some(3), threads: None, config_path: None }.resolve_seed(Some(&cfg));
        let from_cfg =
            Shared { seed: None, threads: None, config_path: None }.resolve_seed(Some(&cfg));
        let fallback = Shared { seed: None, threads: None, config_path: None }.resolve_seed(None);
        assert_eq!((with_flag, from_cfg, fallback), (3, 7, 0));
    }
}
