//! Variational-EM driver: alternates amortised estimator training (E-step)
//! with Normal-inverse-Wishart group updates (M-step) over a growing,
//! mixture-tagged training dataset.
//!
//! Round layout. Round t trains on the pairs accumulated so far, computes
//! per-observation moments from the trained estimator, runs the M-step, and
//! finally appends a new proposal component N(theta_g, sigma_g) together with
//! its n_t pairs. Appending pairs at the same moment as the component keeps
//! the ledger invariant (component pair counts sum to |D|) true at every
//! point a caller can observe. At t = t_initial, before that round trains,
//! the wide initial pairs and component are swapped for a refined component
//! averaged over the burn-in rounds.
//!
//! Every random draw comes from a stream keyed by (seed, tag or round,
//! purpose), never from one sequential stream, so a run can be resumed from
//! any round checkpoint and reproduce the uninterrupted run bit for bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{fit_snpe_atomic, Estimator, EstimatorSpec, FitReport, TrainConfig};
use crate::gauss::{symmetrize, Mvn};
use crate::mixture::{sample_component, ProposalMixture, RoundTag};
use crate::niw::{m_step, NiwHyper};
use crate::sim::{simulate_stats_batch, ErgmModel, ErgmParams, SimConfig};

/// Threshold on the mean relative change of theta_g; two consecutive rounds
/// below it stop the run.
pub const CONVERGENCE_THRESHOLD: f64 = 0.01;

/// |old coordinate| below this makes the relative change use the absolute
/// change instead, so a coordinate passing through zero cannot blow up the
/// criterion.
const RELATIVE_CHANGE_GUARD: f64 = 1e-8;

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Purpose salts for derived RNG streams.
const THETA_STREAM: u64 = 1;
const X_STREAM: u64 = 2;
const MOMENTS_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;

/// Maps a simulator seed and a salt to an independent stream seed
/// (splitmix64 finalizer; consecutive salts give uncorrelated outputs).
pub fn stream_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_salt(tag: RoundTag) -> u64 {
    match tag {
        RoundTag::Initial => 1 << 32,
        RoundTag::Refined => 2 << 32,
        RoundTag::Round(t) => (3 << 32) | u64::from(t),
    }
}

/// Forward model the driver trains against: one context vector per
/// parameter vector.
pub trait Simulator: Sync {
    fn theta_dim(&self) -> usize;

    fn x_dim(&self) -> usize;

    /// Simulates one context per parameter vector, in order. Must be a
    /// deterministic function of (thetas, seed); the driver replays whole
    /// batches under the same seed when resuming from a checkpoint.
    fn simulate_batch(&self, thetas: &[DVector<f64>], seed: u64) -> Result<Vec<DVector<f64>>>;
}

/// Gaussian stand-in forward model, x = theta + noise_sd * eps. Its exact
/// conditional posterior makes end-to-end recovery checkable in closed form.
#[derive(Clone, Debug)]
pub struct GaussianSimulator {
    dim: usize,
    noise_sd: f64,
}

impl GaussianSimulator {
    pub fn new(dim: usize, noise_sd: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("simulator dimension must be positive".into()));
        }
        if !noise_sd.is_finite() || noise_sd <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise_sd must be finite and positive, got {noise_sd}"
            )));
        }
        Ok(GaussianSimulator { dim, noise_sd })
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }
}

impl Simulator for GaussianSimulator {
    fn theta_dim(&self) -> usize {
        self.dim
    }

    fn x_dim(&self) -> usize {
        self.dim
    }

    fn simulate_batch(&self, thetas: &[DVector<f64>], seed: u64) -> Result<Vec<DVector<f64>>> {
        // One stream in batch order is enough: batches are only ever
        // replayed whole, under the same seed.
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(thetas
            .iter()
            .map(|t| t + self.noise_sd * crate::gauss::sample_std_normal_vec(t.len(), &mut rng))
            .collect())
    }
}

/// ERGM forward model: simulates one network per parameter vector and
/// reduces it to the model's summary-statistic vector.
#[derive(Clone, Debug)]
pub struct ErgmSimulator {
    model: ErgmModel,
    base: SimConfig,
}

impl ErgmSimulator {
    /// `base.seed` is ignored; the driver supplies a per-batch seed.
    pub fn new(model: ErgmModel, base: SimConfig) -> Self {
        ErgmSimulator { model, base }
    }

    pub fn model(&self) -> &ErgmModel {
        &self.model
    }
}

impl Simulator for ErgmSimulator {
    fn theta_dim(&self) -> usize {
        self.model.dim()
    }

    fn x_dim(&self) -> usize {
        self.model.dim()
    }

    fn simulate_batch(&self, thetas: &[DVector<f64>], seed: u64) -> Result<Vec<DVector<f64>>> {
        let params: Vec<ErgmParams> = thetas
            .iter()
            .map(|t| ErgmParams::new(t.clone()))
            .collect::<Result<_>>()?;
        let cfg = SimConfig { seed, ..self.base.clone() };
        let stats = simulate_stats_batch(&self.model, &params, &cfg);
        Ok(stats.iter().map(|s| s.select(&self.model.terms)).collect())
    }
}

/// Parameter draws and their simulator outputs, aligned by index.
type PairColumns = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// One training pair and the proposal component it was drawn from.
#[derive(Clone, Debug)]
pub struct TaggedPair {
    pub theta: DVector<f64>,
    pub x: DVector<f64>,
    pub tag: RoundTag,
}

/// Tagged training dataset D. Pairs are stored in insertion order, one
/// contiguous block per tag, mirroring the proposal component order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pairs: Vec<TaggedPair>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset { pairs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[TaggedPair] {
        &self.pairs
    }

    pub fn count_tag(&self, tag: RoundTag) -> usize {
        self.pairs.iter().filter(|p| p.tag == tag).count()
    }

    pub fn extend(&mut self, thetas: Vec<DVector<f64>>, xs: Vec<DVector<f64>>, tag: RoundTag) {
        debug_assert_eq!(thetas.len(), xs.len());
        self.pairs.extend(
            thetas
                .into_iter()
                .zip(xs)
                .map(|(theta, x)| TaggedPair { theta, x, tag }),
        );
    }

    /// Drops every pair with this tag, preserving the order of the rest.
    /// Returns how many were removed.
    pub fn remove_tag(&mut self, tag: RoundTag) -> usize {
        let before = self.pairs.len();
        self.pairs.retain(|p| p.tag != tag);
        before - self.pairs.len()
    }

    /// Untagged (theta, x) clones in dataset order, as the trainers expect.
    pub fn training_pairs(&self) -> Vec<(DVector<f64>, DVector<f64>)> {
        self.pairs
            .iter()
            .map(|p| (p.theta.clone(), p.x.clone()))
            .collect()
    }

    /// SHA-256 over tags and exact f64 bits in dataset order. Resuming from
    /// a checkpoint re-simulates the dataset and must reproduce this digest.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pairs {
            match p.tag {
                RoundTag::Initial => h.update([0u8]),
                RoundTag::Refined => h.update([1u8]),
                RoundTag::Round(t) => {
                    h.update([2u8]);
                    h.update(t.to_le_bytes());
                }
            }
            for v in p.theta.iter().chain(p.x.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sampling and estimator schedule for the adjustment scheme.
#[derive(Clone, Debug)]
pub struct Schedule {
    /// Burn-in length: rounds before `t_initial` train the small estimator;
    /// at `t_initial` the initial pairs are swapped for refined ones and the
    /// large estimator takes over.
    pub t_initial: usize,
    /// Pairs drawn from the wide initial component.
    pub n1: usize,
    /// Pairs drawn from each round's new component.
    pub nt: usize,
    /// Pairs drawn from the refined component at the swap.
    pub n_refined: usize,
    /// Covariance inflation factor for the refined component.
    pub cov_inflation: f64,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
    pub burn_in_spec: EstimatorSpec,
    pub main_spec: EstimatorSpec,
}

impl Schedule {
    /// Production defaults: t_initial 4, N1 100k, Nt 20k, N_refined 50k,
    /// inflation 5, initial proposal N(0, 10 I), MAF 32x5 during burn-in and
    /// MAF 64x10 after.
    pub fn defaults(theta_dim: usize, context_dim: usize) -> Self {
        Schedule {
            t_initial: 4,
            n1: 100_000,
            nt: 20_000,
            n_refined: 50_000,
            cov_inflation: 5.0,
            initial_mean: DVector::zeros(theta_dim),
            initial_cov: DMatrix::identity(theta_dim, theta_dim) * 10.0,
            burn_in_spec: EstimatorSpec::maf(5, 32, theta_dim, context_dim),
            main_spec: EstimatorSpec::maf(10, 64, theta_dim, context_dim),
        }
    }

    pub fn validate(&self, theta_dim: usize, context_dim: usize) -> Result<()> {
        if self.t_initial < 1 {
            return Err(Error::InvalidConfig("t_initial must be at least 1".into()));
        }
        if self.n1 <= self.nt {
            return Err(Error::InvalidConfig(format!(
                "initial batch must exceed the per-round batch, got n1 = {} <= nt = {}",
                self.n1, self.nt
            )));
        }
        if self.nt < 1 || self.n_refined < 1 {
            return Err(Error::InvalidConfig("nt and n_refined must be at least 1".into()));
        }
        if !self.cov_inflation.is_finite() || self.cov_inflation <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "cov_inflation must be finite and positive, got {}",
                self.cov_inflation
            )));
        }
        if self.initial_mean.len() != theta_dim {
            return Err(Error::DimMismatch {
                expected: theta_dim,
                got: self.initial_mean.len(),
                context: "schedule initial_mean".into(),
            });
        }
        // Mvn::new checks shape, symmetry, and positive definiteness.
        Mvn::new(self.initial_mean.clone(), &self.initial_cov)?;
        for (name, spec) in [("burn_in", &self.burn_in_spec), ("main", &self.main_spec)] {
            spec.validate()?;
            if spec.theta_dim != theta_dim || spec.context_dim != context_dim {
                return Err(Error::InvalidConfig(format!(
                    "{name} estimator spec is {}x{}, expected {theta_dim}x{context_dim}",
                    spec.theta_dim, spec.context_dim
                )));
            }
        }
        Ok(())
    }
}

/// Run-level knobs that are not part of the sampling schedule.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Monte-Carlo draws per observation for the M-step moments.
    pub s_moments: usize,
    pub max_rounds: usize,
    pub seed: u64,
    /// When set, a checkpoint (state summary + estimator) is written after
    /// every round, and `resume` can continue from the latest one.
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            train: TrainConfig::new(seed),
            s_moments: 10_000,
            max_rounds: 30,
            seed,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.s_moments < 2 {
            return Err(Error::InvalidConfig(format!(
                "s_moments must be at least 2, got {}",
                self.s_moments
            )));
        }
        if self.max_rounds < 1 {
            return Err(Error::InvalidConfig("max_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mutable EM state after `round` completed rounds.
#[derive(Clone, Debug)]
pub struct HierState {
    pub round: usize,
    pub theta_g: DVector<f64>,
    pub sigma_g: DMatrix<f64>,
    pub proposal: ProposalMixture,
    pub dataset: Dataset,
    /// Latest estimator checkpoint file, when checkpointing is on.
    pub estimator_checkpoint: Option<PathBuf>,
    /// Mean relative change of theta_g per round, recorded from round 2 on
    /// (round 1 has no predecessor), so its length is round - 1.
    pub trace: Vec<f64>,
}

/// Wall-clock seconds by pipeline stage.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub simulate: f64,
    pub train: f64,
    pub moments: f64,
}

impl StageTimes {
    fn add(&mut self, other: StageTimes) {
        self.simulate += other.simulate;
        self.train += other.train;
        self.moments += other.moments;
    }
}

/// Everything recorded about one executed round.
#[derive(Clone, Debug)]
pub struct RoundRecord {
    pub round: usize,
    pub theta_g: DVector<f64>,
    pub sigma_g: DMatrix<f64>,
    pub posterior: NiwHyper,
    /// None for round 1, which has no previous estimate to compare against.
    pub rel_change: Option<f64>,
    pub stage_seconds: StageTimes,
    /// |D| at the end of the round, including the pairs appended for the
    /// next round's component.
    pub dataset_size: usize,
    pub fit: FitReport,
}

/// Run-level accounting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub rounds: usize,
    pub converged: bool,
    /// Total simulator calls (pairs drawn), including the initial batch.
    pub sim_count: usize,
    pub stage_seconds: StageTimes,
    pub seed: u64,
}

pub struct RunOutput {
    pub state: HierState,
    /// Records for the rounds this call executed. A resumed run reports
    /// only the rounds after the checkpoint; earlier rounds live in their
    /// own round files.
    pub history: Vec<RoundRecord>,
    /// Estimator trained in the final executed round.
    pub estimator: Estimator,
    pub converged: bool,
    pub manifest: RunManifest,
}

/// E-step: trains one amortised estimator on all of D with the current
/// proposal, under the prior N(theta_g, sigma_g). The same estimator then
/// serves every observation; nothing here depends on how many there are.
pub fn e_step(
    state: &HierState,
    spec: &EstimatorSpec,
    cfg: &TrainConfig,
) -> Result<(Estimator, FitReport)> {
    if state.dataset.is_empty() {
        return Err(Error::DegenerateData("e-step needs a non-empty dataset".into()));
    }
    let prior = Mvn::new(state.theta_g.clone(), &state.sigma_g)?;
    fit_snpe_atomic(spec, &state.dataset.training_pairs(), &prior, &state.proposal, cfg)
}

/// Monte-Carlo moments of the estimator's posterior for one observation:
/// sample mean and 1/S-normalized covariance of S draws, symmetrized.
pub fn moments_from_estimator(
    est: &Estimator,
    x: &DVector<f64>,
    s: usize,
    rng: &mut impl Rng,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if s < 2 {
        return Err(Error::InvalidConfig(format!(
            "moment estimation needs at least 2 draws, got {s}"
        )));
    }
    let draws = est.sample(x, s, rng)?;
    let d = draws.ncols();
    let mu = DVector::from_fn(d, |j, _| draws.column(j).sum() / s as f64);
    let mut sigma = DMatrix::zeros(d, d);
    for r in 0..s {
        let centered = DVector::from_fn(d, |j, _| draws[(r, j)] - mu[j]);
        sigma += &centered * centered.transpose();
    }
    sigma /= s as f64;
    symmetrize(&mut sigma);
    Ok((mu, sigma))
}

/// Mean over coordinates of |new - old| / |old|, with |old| below the guard
/// falling back to the absolute change.
pub fn relative_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    debug_assert_eq!(new.len(), old.len());
    let total: f64 = new
        .iter()
        .zip(old.iter())
        .map(|(&a, &b)| {
            let delta = (a - b).abs();
            if b.abs() < RELATIVE_CHANGE_GUARD {
                delta
            } else {
                delta / b.abs()
            }
        })
        .sum();
    total / new.len() as f64
}

/// Runs the full EM loop. Returns the final state, per-round history, the
/// last trained estimator, and whether the convergence criterion fired
/// before `max_rounds`.
pub fn run(
    sim: &dyn Simulator,
    observations: &[DVector<f64>],
    niw: &NiwHyper,
    schedule: &Schedule,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    let driver = Driver { sim, observations, niw, schedule, cfg };
    driver.validate()?;
    let mut totals = Totals::default();
    let state = driver.init_state(&mut totals)?;
    driver.run_loop(state, Vec::new(), 1, totals)
}

/// Continues a checkpointed run from its latest round. The dataset is
/// re-simulated from the checkpoint's component list (every draw stream is
/// keyed by tag, not position) and verified against the stored digest, so
/// the continuation is bit-identical to the uninterrupted run.
pub fn resume(
    sim: &dyn Simulator,
    observations: &[DVector<f64>],
    niw: &NiwHyper,
    schedule: &Schedule,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<RunOutput> {
    let driver = Driver { sim, observations, niw, schedule, cfg };
    driver.validate()?;
    let ckpt = latest_checkpoint(dir)?;
    if ckpt.seed != cfg.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written under seed {}, run configured with seed {}",
            ckpt.seed, cfg.seed
        )));
    }
    if ckpt.round >= cfg.max_rounds {
        return Err(Error::Checkpoint(format!(
            "checkpoint is already at round {} of max_rounds {}",
            ckpt.round, cfg.max_rounds
        )));
    }
    let mut totals = Totals::default();
    let (state, summaries) = driver.restore(&ckpt, dir, &mut totals)?;
    driver.run_loop_with_summaries(state, summaries, Vec::new(), ckpt.round + 1, totals)
}

#[derive(Default)]
struct Totals {
    sim_count: usize,
    stage: StageTimes,
}

/// Per-round (theta_g, sigma_g) kept for the refined-component average;
/// unlike RoundRecord it survives a resume.
#[derive(Clone, Debug)]
struct RoundSummary {
    round: usize,
    theta_g: DVector<f64>,
    sigma_g: DMatrix<f64>,
}

struct Driver<'a> {
    sim: &'a dyn Simulator,
    observations: &'a [DVector<f64>],
    niw: &'a NiwHyper,
    schedule: &'a Schedule,
    cfg: &'a RunConfig,
}

impl Driver<'_> {
    fn validate(&self) -> Result<()> {
        let d = self.sim.theta_dim();
        let m = self.sim.x_dim();
        if self.observations.is_empty() {
            return Err(Error::InvalidConfig("at least one observation is required".into()));
        }
        for (i, x) in self.observations.iter().enumerate() {
            if x.len() != m {
                return Err(Error::DimMismatch {
                    expected: m,
                    got: x.len(),
                    context: format!("observation {i}"),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("observation {i}")));
            }
        }
        if self.niw.dim() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: self.niw.dim(),
                context: "hyper-prior dimension".into(),
            });
        }
        self.schedule.validate(d, m)?;
        self.cfg.validate()
    }

    /// Draws n pairs from N(mean, cov) under this tag's streams and returns
    /// (thetas, xs). Same tag and seed always reproduce the same pairs.
    fn draw_pairs(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        n: usize,
        tag: RoundTag,
    ) -> Result<PairColumns> {
        let base = stream_seed(self.cfg.seed, tag_salt(tag));
        let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(base, THETA_STREAM));
        let thetas = sample_component(mean, cov, n, &mut rng)?;
        let xs = self.sim.simulate_batch(&thetas, stream_seed(base, X_STREAM))?;
        Ok((thetas, xs))
    }

    fn init_state(&self, totals: &mut Totals) -> Result<HierState> {
        let started = Instant::now();
        let (thetas, xs) = self.draw_pairs(
            &self.schedule.initial_mean,
            &self.schedule.initial_cov,
            self.schedule.n1,
            RoundTag::Initial,
        )?;
        totals.stage.simulate += started.elapsed().as_secs_f64();
        totals.sim_count += self.schedule.n1;

        let mut dataset = Dataset::new();
        dataset.extend(thetas, xs, RoundTag::Initial);
        let proposal = ProposalMixture::empty().add_component(
            self.schedule.initial_mean.clone(),
            self.schedule.initial_cov.clone(),
            self.schedule.n1,
            RoundTag::Initial,
        )?;
        Ok(HierState {
            round: 0,
            theta_g: self.niw.mu0().clone(),
            sigma_g: self.niw.psi0().clone(),
            proposal,
            dataset,
            estimator_checkpoint: None,
            trace: Vec::new(),
        })
    }

    /// Refined component: mean of the M-step outputs over the burn-in
    /// rounds completed before the swap (all rounds except the prior
    /// initialisation), covariance inflated. With t_initial = 1 no round
    /// has completed and the initial state stands in.
    fn refined_component(
        &self,
        summaries: &[RoundSummary],
        state: &HierState,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let picked: Vec<&RoundSummary> = summaries
            .iter()
            .filter(|s| s.round < self.schedule.t_initial)
            .collect();
        if picked.is_empty() {
            let mut cov = &state.sigma_g * self.schedule.cov_inflation;
            symmetrize(&mut cov);
            return (state.theta_g.clone(), cov);
        }
        let k = picked.len() as f64;
        let d = state.theta_g.len();
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for s in &picked {
            mean += &s.theta_g;
            cov += &s.sigma_g;
        }
        mean /= k;
        cov *= self.schedule.cov_inflation / k;
        symmetrize(&mut cov);
        (mean, cov)
    }

    /// Executes round t in place. Returns the trained estimator and whether
    /// the convergence criterion has fired.
    fn one_round(
        &self,
        t: usize,
        state: &mut HierState,
        summaries: &mut Vec<RoundSummary>,
        history: &mut Vec<RoundRecord>,
        totals: &mut Totals,
    ) -> Result<(Estimator, bool)> {
        let mut stage = StageTimes::default();

        if t == self.schedule.t_initial {
            let started = Instant::now();
            let (mu_refined, sigma_refined) = self.refined_component(summaries, state);
            state.dataset.remove_tag(RoundTag::Initial);
            let (proposal, _) = state.proposal.remove_component(RoundTag::Initial)?;
            let (thetas, xs) = self.draw_pairs(
                &mu_refined,
                &sigma_refined,
                self.schedule.n_refined,
                RoundTag::Refined,
            )?;
            state.dataset.extend(thetas, xs, RoundTag::Refined);
            state.proposal = proposal.add_component(
                mu_refined,
                sigma_refined,
                self.schedule.n_refined,
                RoundTag::Refined,
            )?;
            stage.simulate += started.elapsed().as_secs_f64();
            totals.sim_count += self.schedule.n_refined;
        }

        let spec = if t < self.schedule.t_initial {
            &self.schedule.burn_in_spec
        } else {
            &self.schedule.main_spec
        };
        let round_base = stream_seed(self.cfg.seed, (4 << 32) | t as u64);
        let train_cfg = TrainConfig {
            seed: stream_seed(round_base, TRAIN_STREAM),
            ..self.cfg.train
        };
        let started = Instant::now();
        let (estimator, fit) = e_step(state, spec, &train_cfg)?;
        stage.train += started.elapsed().as_secs_f64();

        let started = Instant::now();
        let moment_seeds: Vec<u64> = (0..self.observations.len())
            .map(|i| stream_seed(stream_seed(round_base, MOMENTS_STREAM), i as u64))
            .collect();
        let moments: Vec<(DVector<f64>, DMatrix<f64>)> = self
            .observations
            .par_iter()
            .zip(moment_seeds.par_iter())
            .map(|(x, &seed)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                moments_from_estimator(&estimator, x, self.cfg.s_moments, &mut rng)
            })
            .collect::<Result<_>>()?;
        stage.moments += started.elapsed().as_secs_f64();

        let update = m_step(self.niw, &moments)?;
        let rel_change = if t >= 2 {
            Some(relative_change(&update.theta_g, &state.theta_g))
        } else {
            None
        };
        state.theta_g = update.theta_g;
        state.sigma_g = update.sigma_g;
        if let Some(r) = rel_change {
            state.trace.push(r);
        }

        let started = Instant::now();
        let (thetas, xs) = self.draw_pairs(
            &state.theta_g,
            &state.sigma_g,
            self.schedule.nt,
            RoundTag::Round(t as u32),
        )?;
        state.dataset.extend(thetas, xs, RoundTag::Round(t as u32));
        state.proposal = state.proposal.add_component(
            state.theta_g.clone(),
            state.sigma_g.clone(),
            self.schedule.nt,
            RoundTag::Round(t as u32),
        )?;
        stage.simulate += started.elapsed().as_secs_f64();
        totals.sim_count += self.schedule.nt;

        state.round = t;
        summaries.push(RoundSummary {
            round: t,
            theta_g: state.theta_g.clone(),
            sigma_g: state.sigma_g.clone(),
        });

        if let Some(dir) = &self.cfg.checkpoint_dir {
            let path = write_checkpoint(dir, t, state, summaries, &estimator, &update.posterior, rel_change, self.cfg.seed)?;
            state.estimator_checkpoint = Some(path);
        }

        history.push(RoundRecord {
            round: t,
            theta_g: state.theta_g.clone(),
            sigma_g: state.sigma_g.clone(),
            posterior: update.posterior,
            rel_change,
            stage_seconds: stage,
            dataset_size: state.dataset.len(),
            fit,
        });
        totals.stage.add(stage);

        let n = state.trace.len();
        let converged =
            n >= 2 && state.trace[n - 2..].iter().all(|&r| r < CONVERGENCE_THRESHOLD);
        Ok((estimator, converged))
    }

    fn run_loop(
        &self,
        state: HierState,
        history: Vec<RoundRecord>,
        start_round: usize,
        totals: Totals,
    ) -> Result<RunOutput> {
        self.run_loop_with_summaries(state, Vec::new(), history, start_round, totals)
    }

    fn run_loop_with_summaries(
        &self,
        mut state: HierState,
        mut summaries: Vec<RoundSummary>,
        mut history: Vec<RoundRecord>,
        start_round: usize,
        mut totals: Totals,
    ) -> Result<RunOutput> {
        let mut last = None;
        let mut converged = false;
        for t in start_round..=self.cfg.max_rounds {
            let (estimator, done) =
                self.one_round(t, &mut state, &mut summaries, &mut history, &mut totals)?;
            last = Some(estimator);
            if done {
                converged = true;
                break;
            }
        }
        let estimator = last.ok_or_else(|| {
            Error::InvalidConfig("no rounds to execute: start round exceeds max_rounds".into())
        })?;
        let manifest = RunManifest {
            rounds: state.round,
            converged,
            sim_count: totals.sim_count,
            stage_seconds: totals.stage,
            seed: self.cfg.seed,
        };
        Ok(RunOutput { state, history, estimator, converged, manifest })
    }

    /// Rebuilds the dataset and state from a checkpoint by replaying each
    /// component's tagged draw streams, then verifies the digest.
    fn restore(
        &self,
        ckpt: &RoundCheckpoint,
        dir: &Path,
        totals: &mut Totals,
    ) -> Result<(HierState, Vec<RoundSummary>)> {
        let mut dataset = Dataset::new();
        let mut proposal = ProposalMixture::empty();
        let started = Instant::now();
        for c in &ckpt.proposal {
            let mean = DVector::from_vec(c.mean.clone());
            let cov = matrix_from_rows(&c.cov, mean.len(), "checkpoint component covariance")?;
            let (thetas, xs) = self.draw_pairs(&mean, &cov, c.n_pairs, c.tag)?;
            dataset.extend(thetas, xs, c.tag);
            proposal = proposal.add_component(mean, cov, c.n_pairs, c.tag)?;
            totals.sim_count += c.n_pairs;
        }
        totals.stage.simulate += started.elapsed().as_secs_f64();

        let digest = dataset.digest();
        if digest != ckpt.dataset_digest {
            return Err(Error::Checkpoint(format!(
                "replayed dataset digest {digest} does not match checkpoint {}; \
                 simulator or schedule differs from the original run",
                ckpt.dataset_digest
            )));
        }

        let d = self.sim.theta_dim();
        let theta_g = DVector::from_vec(ckpt.theta_g.clone());
        let sigma_g = matrix_from_rows(&ckpt.sigma_g, d, "checkpoint sigma_g")?;
        if theta_g.len() != d {
            return Err(Error::Checkpoint(format!(
                "checkpoint dimension {} does not match simulator dimension {d}",
                theta_g.len()
            )));
        }
        let summaries = ckpt
            .history
            .iter()
            .map(|h| {
                Ok(RoundSummary {
                    round: h.round,
                    theta_g: DVector::from_vec(h.theta_g.clone()),
                    sigma_g: matrix_from_rows(&h.sigma_g, d, "checkpoint history sigma_g")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let state = HierState {
            round: ckpt.round,
            theta_g,
            sigma_g,
            proposal,
            dataset,
            estimator_checkpoint: Some(dir.join(&ckpt.estimator_file)),
            trace: ckpt.trace.clone(),
        };
        Ok((state, summaries))
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentDto {
    tag: RoundTag,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    n_pairs: usize,
}

#[derive(Serialize, Deserialize)]
struct RoundSummaryDto {
    round: usize,
    theta_g: Vec<f64>,
    sigma_g: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NiwDto {
    mu: Vec<f64>,
    kappa: f64,
    psi: Vec<Vec<f64>>,
    nu: f64,
}

/// Per-round state summary written as `round_<t>.json` next to the
/// estimator checkpoint.
#[derive(Serialize, Deserialize)]
pub struct RoundCheckpoint {
    format_version: u32,
    pub round: usize,
    pub theta_g: Vec<f64>,
    pub sigma_g: Vec<Vec<f64>>,
    posterior: NiwDto,
    pub rel_change: Option<f64>,
    pub trace: Vec<f64>,
    history: Vec<RoundSummaryDto>,
    proposal: Vec<ComponentDto>,
    pub dataset_digest: String,
    pub estimator_file: String,
    pub seed: u64,
}

impl RoundCheckpoint {
    pub fn posterior(&self) -> Result<NiwHyper> {
        let d = self.posterior.mu.len();
        NiwHyper::new(
            DVector::from_vec(self.posterior.mu.clone()),
            self.posterior.kappa,
            matrix_from_rows(&self.posterior.psi, d, "checkpoint posterior psi")?,
            self.posterior.nu,
        )
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], d: usize, context: &str) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Checkpoint(format!("{context} is not {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

#[allow(clippy::too_many_arguments)]
fn write_checkpoint(
    dir: &Path,
    t: usize,
    state: &HierState,
    summaries: &[RoundSummary],
    estimator: &Estimator,
    posterior: &NiwHyper,
    rel_change: Option<f64>,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let estimator_file = format!("estimator_round_{t}.json");
    estimator.save(&dir.join(&estimator_file))?;

    let ckpt = RoundCheckpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        round: t,
        theta_g: state.theta_g.iter().copied().collect(),
        sigma_g: matrix_rows(&state.sigma_g),
        posterior: NiwDto {
            mu: posterior.mu0().iter().copied().collect(),
            kappa: posterior.kappa0(),
            psi: matrix_rows(posterior.psi0()),
            nu: posterior.nu0(),
        },
        rel_change,
        trace: state.trace.clone(),
        history: summaries
            .iter()
            .map(|s| RoundSummaryDto {
                round: s.round,
                theta_g: s.theta_g.iter().copied().collect(),
                sigma_g: matrix_rows(&s.sigma_g),
            })
            .collect(),
        proposal: state
            .proposal
            .components()
            .iter()
            .map(|c| ComponentDto {
                tag: c.tag(),
                mean: c.mean().iter().copied().collect(),
                cov: matrix_rows(c.cov()),
                n_pairs: c.n_pairs(),
            })
            .collect(),
        dataset_digest: state.dataset.digest(),
        estimator_file,
        seed,
    };
    let path = dir.join(format!("round_{t}.json"));
    let json = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| Error::Checkpoint(format!("serializing round {t}: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads `round_<t>.json` from `dir`.
pub fn load_checkpoint(dir: &Path, t: usize) -> Result<RoundCheckpoint> {
    let path = dir.join(format!("round_{t}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt: RoundCheckpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("parsing {}: {e}", path.display())))?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            ckpt.format_version
        )));
    }
    Ok(ckpt)
}

/// Finds the highest-numbered `round_<t>.json` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<RoundCheckpoint> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut best: Option<usize> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(t) = name
            .strip_prefix("round_")
            .and_then(|s| s.strip_suffix(".json"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            best = Some(best.map_or(t, |b| b.max(t)));
        }
    }
    let t = best.ok_or_else(|| {
        Error::Checkpoint(format!("no round checkpoints found in {}", dir.display()))
    })?;
    load_checkpoint(dir, t)
}
