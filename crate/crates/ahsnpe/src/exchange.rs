//! Reference Bayesian fitters used as oracles: the single-network exchange
//! algorithm (doubly intractable MH with an auxiliary network swap) and
//! hierarchical exchange-within-Gibbs with an exact NIW conjugate draw of
//! the group-level parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::gauss::{robust_cholesky, sample_std_normal_vec, Mvn};
use crate::graph::Graph;
use crate::niw::{posterior_draw_given, NiwHyper};
use crate::sim::{simulate, ErgmModel, ErgmParams, SimConfig};

/// Settings for an exchange chain (also reused per-network inside the
/// hierarchical Gibbs sampler, where `n_iters` counts sweeps).
#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeConfig {
    pub n_iters: usize,
    /// Random-walk proposal covariance for theta.
    pub rw_cov: DMatrix<f64>,
    /// Simulator settings for the auxiliary network drawn at each proposal.
    pub aux_sim: SimConfig,
    pub seed: u64,
}

impl ExchangeConfig {
    /// 0.1^2 I random walk and simulator defaults for the node count.
    pub fn defaults(d: usize, n_nodes: usize, seed: u64) -> Self {
        ExchangeConfig {
            n_iters: 10_000,
            rw_cov: DMatrix::identity(d, d) * 0.01,
            aux_sim: SimConfig::defaults(n_nodes, seed),
            seed,
        }
    }
}

/// MCMC output: all visited states (row 0 is the initial state) and the
/// fraction of rows produced by an accepted move.
#[derive(Clone, Debug)]
pub struct PosteriorChain {
    pub draws: DMatrix<f64>,
    pub acceptance_rate: f64,
}

impl PosteriorChain {
    /// Draws with the first `burn` rows dropped, keeping every `thin`-th.
    pub fn thinned(&self, burn: usize, thin: usize) -> DMatrix<f64> {
        let thin = thin.max(1);
        let rows: Vec<usize> = (burn..self.draws.nrows()).step_by(thin).collect();
        DMatrix::from_fn(rows.len(), self.draws.ncols(), |i, j| self.draws[(rows[i], j)])
    }
}

/// Proposal scale adaptation: during the first fifth of the run the
/// log-scale is nudged toward 25% acceptance in windows of 50 proposals,
/// then frozen so the remaining chain satisfies detailed balance.
struct ScaleAdapter {
    adapt_until: usize,
    log_scale: f64,
    window_accepts: usize,
    window_size: usize,
}

const ADAPT_WINDOW: usize = 50;
const TARGET_ACCEPTANCE: f64 = 0.25;

impl ScaleAdapter {
    fn new(total_iters: usize) -> Self {
        ScaleAdapter { adapt_until: total_iters / 5, log_scale: 0.0, window_accepts: 0, window_size: 0 }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, iter: usize, accepted: bool) {
        if iter >= self.adapt_until {
            return;
        }
        self.window_accepts += usize::from(accepted);
        self.window_size += 1;
        if self.window_size == ADAPT_WINDOW {
            let rate = self.window_accepts as f64 / ADAPT_WINDOW as f64;
            self.log_scale = (self.log_scale + rate - TARGET_ACCEPTANCE).clamp(-5.0, 5.0);
            self.window_accepts = 0;
            self.window_size = 0;
        }
    }
}

fn validated_rw_chol(rw_cov: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    if rw_cov.nrows() != d || rw_cov.ncols() != d {
        return Err(Error::DimMismatch { expected: d, got: rw_cov.nrows(), context: "rw_cov shape".into() });
    }
    Ok(robust_cholesky(rw_cov)
        .map_err(|_| Error::NotPositiveDefinite { context: Some("rw_cov".into()) })?
        .l_dirty()
        .lower_triangle())
}

/// One exchange-algorithm acceptance decision: simulate a fresh auxiliary
/// network at the proposal and swap it into the likelihood ratio, so the
/// intractable normalizing constants cancel:
/// log alpha = (theta' - theta) . (h(y_obs) - h(y_aux))
///           + log pi(theta') - log pi(theta).
#[allow(clippy::too_many_arguments)]
fn exchange_step(
    model: &ErgmModel,
    h_obs: &DVector<f64>,
    prior: &Mvn,
    theta: &mut DVector<f64>,
    l_rw: &DMatrix<f64>,
    scale: f64,
    aux_sim: &SimConfig,
    rng: &mut ChaCha12Rng,
) -> Result<bool> {
    let eps = sample_std_normal_vec(theta.len(), rng);
    let proposal = &*theta + (l_rw * eps) * scale;
    let params = ErgmParams::new(proposal.clone())?;
    let aux_cfg = SimConfig { seed: rng.random(), ..aux_sim.clone() };
    let aux = simulate(model, &params, &aux_cfg);
    let h_aux = model.stats_vector(&aux);
    let log_alpha =
        (&proposal - &*theta).dot(&(h_obs - h_aux)) + prior.log_pdf(&proposal) - prior.log_pdf(theta);
    let accept = log_alpha >= 0.0 || rng.random::<f64>() < log_alpha.exp();
    if accept {
        *theta = proposal;
    }
    Ok(accept)
}

/// Metropolis chain targeting the single-network ERGM posterior under a
/// Normal prior. The chain starts at the prior mean; draws include the
/// adaptation prefix, so downstream use should discard a burn-in.
pub fn exchange_fit(
    observed: &Graph,
    model: &ErgmModel,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    cfg: &ExchangeConfig,
) -> Result<PosteriorChain> {
    let d = model.dim();
    if observed.n_nodes() != model.n_nodes {
        return Err(Error::DimMismatch {
            expected: model.n_nodes,
            got: observed.n_nodes(),
            context: "observed graph node count".into(),
        });
    }
    if prior_mean.len() != d {
        return Err(Error::DimMismatch { expected: d, got: prior_mean.len(), context: "prior mean".into() });
    }
    let prior = Mvn::new(prior_mean.clone(), prior_cov)?;
    let l_rw = validated_rw_chol(&cfg.rw_cov, d)?;
    let h_obs = model.stats_vector(observed);

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut theta = prior_mean.clone();
    let mut draws = DMatrix::zeros(cfg.n_iters + 1, d);
    draws.row_mut(0).copy_from(&theta.transpose());
    let mut adapter = ScaleAdapter::new(cfg.n_iters);
    let mut accepted = 0usize;

    for it in 0..cfg.n_iters {
        let acc = exchange_step(model, &h_obs, &prior, &mut theta, &l_rw, adapter.scale(), &cfg.aux_sim, &mut rng)?;
        accepted += usize::from(acc);
        adapter.record(it, acc);
        draws.row_mut(it + 1).copy_from(&theta.transpose());
    }

    let acceptance_rate = accepted as f64 / draws.nrows() as f64;
    Ok(PosteriorChain { draws, acceptance_rate })
}

/// Chains from the hierarchical sampler: the group-level trajectory and one
/// local chain per network, all aligned by sweep (row 0 = initial state).
#[derive(Clone, Debug)]
pub struct HierChains {
    pub theta_g: DMatrix<f64>,
    pub sigma_g: Vec<DMatrix<f64>>,
    pub locals: Vec<DMatrix<f64>>,
    pub local_acceptance: Vec<f64>,
}

/// Exchange-within-Gibbs for multiple networks sharing a Normal population:
/// each sweep runs one exchange update per network's theta_i under the
/// prior N(theta_g, Sigma_g), then draws (theta_g, Sigma_g) exactly from the
/// NIW conjugate posterior given the current {theta_i}.
pub fn hier_gibbs_fit(
    graphs: &[Graph],
    model: &ErgmModel,
    niw: &NiwHyper,
    cfg: &ExchangeConfig,
) -> Result<HierChains> {
    if graphs.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "hierarchical fitting needs at least 2 graphs, got {}",
            graphs.len()
        )));
    }
    let d = model.dim();
    if niw.dim() != d {
        return Err(Error::DimMismatch { expected: d, got: niw.dim(), context: "NIW dimension".into() });
    }
    for (i, g) in graphs.iter().enumerate() {
        if g.n_nodes() != model.n_nodes {
            return Err(Error::DimMismatch {
                expected: model.n_nodes,
                got: g.n_nodes(),
                context: format!("node count of graph {i}"),
            });
        }
    }
    let l_rw = validated_rw_chol(&cfg.rw_cov, d)?;
    let h_obs: Vec<DVector<f64>> = graphs.iter().map(|g| model.stats_vector(g)).collect();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let (mut theta_g, mut sigma_g) = niw.map_estimates();
    let mut thetas: Vec<DVector<f64>> = vec![theta_g.clone(); graphs.len()];

    let rows = cfg.n_iters + 1;
    let mut theta_g_chain = DMatrix::zeros(rows, d);
    let mut sigma_g_chain = Vec::with_capacity(rows);
    let mut local_chains = vec![DMatrix::zeros(rows, d); graphs.len()];
    let mut local_accepts = vec![0usize; graphs.len()];

    theta_g_chain.row_mut(0).copy_from(&theta_g.transpose());
    sigma_g_chain.push(sigma_g.clone());
    for (i, t) in thetas.iter().enumerate() {
        local_chains[i].row_mut(0).copy_from(&t.transpose());
    }

    // Networks are exchangeable, so one shared proposal scale is adapted on
    // the pooled acceptance rate.
    let mut adapter = ScaleAdapter::new(cfg.n_iters * graphs.len());

    for sweep in 0..cfg.n_iters {
        let prior = Mvn::new(theta_g.clone(), &sigma_g)?;
        for i in 0..graphs.len() {
            let acc = exchange_step(
                model,
                &h_obs[i],
                &prior,
                &mut thetas[i],
                &l_rw,
                adapter.scale(),
                &cfg.aux_sim,
                &mut rng,
            )?;
            local_accepts[i] += usize::from(acc);
            adapter.record(sweep * graphs.len() + i, acc);
        }
        let (tg, sg) = posterior_draw_given(niw, &thetas, &mut rng)?;
        theta_g = tg;
        sigma_g = sg;

        theta_g_chain.row_mut(sweep + 1).copy_from(&theta_g.transpose());
        sigma_g_chain.push(sigma_g.clone());
        for (i, t) in thetas.iter().enumerate() {
            local_chains[i].row_mut(sweep + 1).copy_from(&t.transpose());
        }
    }

    let local_acceptance = local_accepts.iter().map(|&a| a as f64 / rows as f64).collect();
    Ok(HierChains {
        theta_g: theta_g_chain,
        sigma_g: sigma_g_chain,
        locals: local_chains,
        local_acceptance,
    })
}
