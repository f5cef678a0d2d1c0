//! Training loops for the conditional density estimators: maximum-likelihood
//! (the mean negative log-density) and the atomic contrastive loss against a
//! tractable proposal. Both use Adam with early stopping on held-out
//! validation loss and are single-threaded and deterministic per seed.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Estimator, EstimatorSpec, Net, Standardizer};
use crate::error::{Error, Result};
use crate::flow::mdn::MdnNet;
use crate::flow::tape::{NodeId, Tape};
use crate::gauss::{log_sum_exp, Mvn};
use crate::mixture::ProposalMixture;

/// Optimization settings shared by both fitting modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    /// Softmax-contrast set size M (positive plus M-1 atoms).
    pub n_atoms: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 5e-4,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.1,
            n_atoms: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.n_atoms < 2 {
            return Err(Error::InvalidConfig(format!("n_atoms must be at least 2, got {}", self.n_atoms)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(0)
    }
}

/// Per-epoch loss trace of one fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Maximum-likelihood fit: minimizes the mean negative log-density of the
/// pairs, returning the parameters with the best validation loss.
pub fn fit_npe(
    spec: &EstimatorSpec,
    data: &[(DVector<f64>, DVector<f64>)],
    cfg: &TrainConfig,
) -> Result<(Estimator, FitReport)> {
    spec.validate()?;
    cfg.validate()?;
    if data.len() < 100 {
        return Err(Error::DegenerateData(format!(
            "maximum-likelihood fitting needs at least 100 pairs, got {}",
            data.len()
        )));
    }
    let (thetas, xs) = to_matrices(data, spec)?;
    let standardizer = Standardizer::fit(&thetas, &xs)?;
    let tz = standardizer.standardize_theta(&thetas);
    let xz = standardizer.standardize_x(&xs);
    run_training(spec, standardizer, &tz, &xz, cfg, Mode::Npe)
}

/// Atomic contrastive fit: per batch item b, M-1 atoms are drawn uniformly
/// without replacement from the batch's other theta values and the loss is
/// -log[ q(theta_b|x_b) r(theta_b) / sum over atoms(b) + {theta_b} of q r ]
/// with r = 1/prior. Within an atom set the positive index is uniform by
/// exchangeability, so the continuous proposal density is common to every
/// assignment and cancels; the softmax optimum is q proportional to
/// likelihood times prior. The converged estimator therefore targets the
/// posterior under the prior even though theta was drawn from the proposal,
/// whose job is coverage: it decides where training pairs exist at all.
pub fn fit_snpe_atomic(
    spec: &EstimatorSpec,
    data: &[(DVector<f64>, DVector<f64>)],
    prior: &Mvn,
    proposal: &ProposalMixture,
    cfg: &TrainConfig,
) -> Result<(Estimator, FitReport)> {
    spec.validate()?;
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "atomic-loss fitting needs at least 2 pairs, got {}",
            data.len()
        )));
    }
    if prior.dim() != spec.theta_dim {
        return Err(Error::DimMismatch {
            expected: spec.theta_dim,
            got: prior.dim(),
            context: "prior dimension".into(),
        });
    }
    let (thetas, xs) = to_matrices(data, spec)?;
    // The prior is fixed for the whole fit; precompute the weights per pair.
    // The proposal density is evaluated only to enforce coverage: every
    // training theta must lie in its support.
    let mut log_r = Vec::with_capacity(data.len());
    for (theta, _) in data {
        let log_prior = prior.log_pdf(theta);
        let log_proposal = proposal.log_density(theta)?;
        if !log_prior.is_finite() || !log_proposal.is_finite() {
            return Err(Error::RatioUnderflow {
                theta: theta.as_slice().to_vec(),
                log_prior,
                log_proposal,
            });
        }
        log_r.push(-log_prior);
    }
    let standardizer = Standardizer::fit(&thetas, &xs)?;
    let tz = standardizer.standardize_theta(&thetas);
    let xz = standardizer.standardize_x(&xs);
    run_training(spec, standardizer, &tz, &xz, cfg, Mode::Snpe { log_r: &log_r, n_atoms: cfg.n_atoms })
}

/// Atomic loss of a fitted estimator over a whole data set, atoms drawn
/// deterministically from `seed`. `log_ratio` entries are log prior minus
/// log proposal per pair; shifting all of them by one constant (rescaling
/// the proposal by a positive factor) leaves the value unchanged, as does
/// the standardization Jacobian, which cancels between numerator and
/// denominator.
pub fn atomic_loss(
    est: &Estimator,
    data: &[(DVector<f64>, DVector<f64>)],
    log_ratio: &[f64],
    n_atoms: usize,
    seed: u64,
) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::DegenerateData(format!("atomic loss needs at least 2 pairs, got {}", data.len())));
    }
    if log_ratio.len() != data.len() {
        return Err(Error::DimMismatch {
            expected: data.len(),
            got: log_ratio.len(),
            context: "log_ratio entries".into(),
        });
    }
    if n_atoms < 2 {
        return Err(Error::InvalidConfig(format!("n_atoms must be at least 2, got {n_atoms}")));
    }
    let (thetas, xs) = to_matrices(data, est.spec())?;
    let tz = est.standardizer().standardize_theta(&thetas);
    let xz = est.standardizer().standardize_x(&xs);
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let groups = draw_groups(&rows, n_atoms, &mut rng);
    Ok(atomic_loss_plain(&est.spec().net(), est.params(), &tz, &xz, log_ratio, &groups))
}

enum Mode<'a> {
    Npe,
    Snpe { log_r: &'a [f64], n_atoms: usize },
}

fn to_matrices(
    data: &[(DVector<f64>, DVector<f64>)],
    spec: &EstimatorSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    for (i, (t, x)) in data.iter().enumerate() {
        if t.len() != spec.theta_dim {
            return Err(Error::DimMismatch {
                expected: spec.theta_dim,
                got: t.len(),
                context: format!("theta in pair {i}"),
            });
        }
        if x.len() != spec.context_dim {
            return Err(Error::DimMismatch {
                expected: spec.context_dim,
                got: x.len(),
                context: format!("x in pair {i}"),
            });
        }
        if t.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("training pair {i}")));
        }
    }
    let thetas = DMatrix::from_fn(data.len(), spec.theta_dim, |i, j| data[i].0[j]);
    let xs = DMatrix::from_fn(data.len(), spec.context_dim, |i, j| data[i].1[j]);
    Ok((thetas, xs))
}

fn split_indices(n: usize, val_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Random hidden weights (scale 1/sqrt(fan_in)), zero biases, and zeroed
/// output heads so the estimator starts at the standard-normal reference.
/// Biases are identified structurally: a weight matrix can also have one
/// row (1-dimensional input), and zeroing it alongside the heads would put
/// the net at an exact saddle where every weight gradient vanishes.
fn init_params(net: &Net, rng: &mut impl Rng) -> Vec<DMatrix<f64>> {
    let bias: std::collections::HashSet<usize> = net.bias_params().into_iter().collect();
    let mut params: Vec<DMatrix<f64>> = net
        .param_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, (r, c))| {
            if bias.contains(&i) {
                DMatrix::zeros(r, c)
            } else {
                let scale = 1.0 / (r as f64).sqrt();
                DMatrix::from_fn(r, c, |_, _| {
                    let v: f64 = StandardNormal.sample(rng);
                    scale * v
                })
            }
        })
        .collect();
    match net {
        Net::Maf(m) => {
            for i in m.identity_start_params() {
                params[i].fill(0.0);
            }
        }
        Net::Mdn(m) => {
            let (zeroed, diag_biases) = m.identity_start_params();
            for i in zeroed {
                params[i].fill(0.0);
            }
            for i in diag_biases {
                params[i].fill(MdnNet::unit_diag_bias());
            }
        }
    }
    params
}

struct Adam {
    lr: f64,
    t: i32,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(shapes: &[(usize, usize)], lr: f64) -> Self {
        Adam {
            lr,
            t: 0,
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
        }
    }

    fn step(&mut self, params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for idx in 0..p.len() {
                let gi = g[idx];
                m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * gi;
                v[idx] = ADAM_BETA2 * v[idx] + (1.0 - ADAM_BETA2) * gi * gi;
                p[idx] -= self.lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn gather(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Contrast groups: for each row, itself first, then m_eff - 1 distinct
/// other rows chosen uniformly (partial Fisher-Yates).
fn draw_groups(rows: &[usize], n_atoms: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let m_eff = n_atoms.min(rows.len());
    let mut scratch: Vec<usize> = Vec::with_capacity(rows.len());
    rows.iter()
        .map(|&pos| {
            let mut group = Vec::with_capacity(m_eff);
            group.push(pos);
            scratch.clear();
            scratch.extend(rows.iter().copied().filter(|&r| r != pos));
            for k in 0..m_eff - 1 {
                let j = rng.random_range(k..scratch.len());
                scratch.swap(k, j);
                group.push(scratch[k]);
            }
            group
        })
        .collect()
}

fn expand_groups(
    tz: &DMatrix<f64>,
    xz: &DMatrix<f64>,
    log_r: &[f64],
    groups: &[Vec<usize>],
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, usize) {
    let m_eff = groups[0].len();
    let total = groups.len() * m_eff;
    let t_exp = DMatrix::from_fn(total, tz.ncols(), |i, j| tz[(groups[i / m_eff][i % m_eff], j)]);
    // Every atom in a group shares the positive pair's context.
    let x_exp = DMatrix::from_fn(total, xz.ncols(), |i, j| xz[(groups[i / m_eff][0], j)]);
    let r_exp = DMatrix::from_fn(total, 1, |i, _| log_r[groups[i / m_eff][i % m_eff]]);
    (t_exp, x_exp, r_exp, m_eff)
}

fn take_param_grads(
    mut grads: Vec<Option<DMatrix<f64>>>,
    ids: &[NodeId],
    params: &[DMatrix<f64>],
) -> Vec<DMatrix<f64>> {
    ids.iter()
        .zip(params)
        .map(|(id, p)| {
            grads[id.index()]
                .take()
                // A parameter can be absent from the graph (empty matrices).
                .unwrap_or_else(|| DMatrix::zeros(p.nrows(), p.ncols()))
        })
        .collect()
}

fn npe_batch_step(
    net: &Net,
    params: &[DMatrix<f64>],
    tz: &DMatrix<f64>,
    xz: &DMatrix<f64>,
    rows: &[usize],
) -> (f64, Vec<DMatrix<f64>>) {
    let tb = gather(tz, rows);
    let xb = gather(xz, rows);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let tn = tape.leaf(tb);
    let xn = tape.leaf(xb);
    let col = net.log_prob_tape(&mut tape, &ids, tn, xn);
    let neg = tape.neg(col);
    let loss = tape.mean_all(neg);
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss);
    (value, take_param_grads(grads, &ids, params))
}

fn snpe_batch_step(
    net: &Net,
    params: &[DMatrix<f64>],
    tz: &DMatrix<f64>,
    xz: &DMatrix<f64>,
    log_r: &[f64],
    groups: &[Vec<usize>],
) -> (f64, Vec<DMatrix<f64>>) {
    let (t_exp, x_exp, r_exp, m_eff) = expand_groups(tz, xz, log_r, groups);
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let tn = tape.leaf(t_exp);
    let xn = tape.leaf(x_exp);
    let col = net.log_prob_tape(&mut tape, &ids, tn, xn);
    let rn = tape.leaf(r_exp);
    let tot = tape.add(col, rn);
    let mat = tape.reshape_rows(tot, groups.len(), m_eff);
    let first = tape.slice_col(mat, 0);
    let lse = tape.row_logsumexp(mat);
    let diff = tape.sub(lse, first);
    let loss = tape.mean_all(diff);
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss);
    (value, take_param_grads(grads, &ids, params))
}

fn atomic_loss_plain(
    net: &Net,
    params: &[DMatrix<f64>],
    tz: &DMatrix<f64>,
    xz: &DMatrix<f64>,
    log_r: &[f64],
    groups: &[Vec<usize>],
) -> f64 {
    let (t_exp, x_exp, r_exp, m_eff) = expand_groups(tz, xz, log_r, groups);
    let col = net.log_prob_plain(params, &t_exp, &x_exp);
    let mut total = 0.0;
    let mut vals = vec![0.0; m_eff];
    for (g, _) in groups.iter().enumerate() {
        for k in 0..m_eff {
            vals[k] = col[g * m_eff + k] + r_exp[(g * m_eff + k, 0)];
        }
        total += log_sum_exp(&vals) - vals[0];
    }
    total / groups.len() as f64
}

fn run_training(
    spec: &EstimatorSpec,
    standardizer: Standardizer,
    tz: &DMatrix<f64>,
    xz: &DMatrix<f64>,
    cfg: &TrainConfig,
    mode: Mode<'_>,
) -> Result<(Estimator, FitReport)> {
    let net = spec.net();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = split_indices(tz.nrows(), cfg.val_fraction, &mut rng);
    let mut params = init_params(&net, &mut rng);
    let shapes = net.param_shapes();
    let mut adam = Adam::new(&shapes, cfg.learning_rate);

    // Validation atoms stay fixed so epoch-to-epoch val losses compare.
    let val_groups = match &mode {
        Mode::Npe => Vec::new(),
        Mode::Snpe { n_atoms, .. } => {
            let mut vr = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
            draw_groups(&val_idx, *n_atoms, &mut vr)
        }
    };
    let (val_t, val_x) = (gather(tz, &val_idx), gather(xz, &val_idx));

    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut stopped_early = false;
    let mut train_hist = Vec::new();
    let mut val_hist = Vec::new();
    let mut order = train_idx.clone();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (value, grads) = match &mode {
                Mode::Npe => npe_batch_step(&net, &params, tz, xz, chunk),
                Mode::Snpe { log_r, n_atoms } => {
                    // A single pair has no atoms to contrast against.
                    if chunk.len() < 2 {
                        continue;
                    }
                    let groups = draw_groups(chunk, *n_atoms, &mut rng);
                    snpe_batch_step(&net, &params, tz, xz, log_r, &groups)
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, value });
            }
            adam.step(&mut params, &grads);
            loss_sum += value * chunk.len() as f64;
            loss_n += chunk.len();
        }
        let train_loss = loss_sum / loss_n.max(1) as f64;

        let val_loss = match &mode {
            Mode::Npe => -net.log_prob_plain(&params, &val_t, &val_x).mean(),
            Mode::Snpe { log_r, .. } => {
                if val_groups.is_empty() || val_groups[0].len() < 2 {
                    // Degenerate single-row validation set; fall back to
                    // likelihood so early stopping still has a signal.
                    -net.log_prob_plain(&params, &val_t, &val_x).mean()
                } else {
                    atomic_loss_plain(&net, &params, tz, xz, log_r, &val_groups)
                }
            }
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}: {val_loss}")));
        }
        train_hist.push(train_loss);
        val_hist.push(val_loss);

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
    }

    let est = Estimator::from_parts(*spec, standardizer, best_params)?;
    Ok((est, FitReport { train_loss: train_hist, val_loss: val_hist, best_epoch, stopped_early }))
}
