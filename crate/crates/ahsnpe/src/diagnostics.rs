//! Posterior summaries, Mahalanobis convergence distances, and posterior
//! predictive checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{robust_cholesky, symmetrize};
use crate::sim::{simulate_stats_batch, ErgmModel, ErgmParams, SimConfig};
use crate::stats::SummaryStats;

/// Quantile levels reported per coordinate: 2.5, 25, 50, 75, 97.5 percent.
pub const QUANTILE_LEVELS: [f64; 5] = [0.025, 0.25, 0.50, 0.75, 0.975];

/// Moments and per-coordinate quantiles of a posterior sample matrix.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    pub mean: DVector<f64>,
    /// Sample covariance (N-1 normalization), symmetrized.
    pub cov: DMatrix<f64>,
    /// quantiles[j][k] is the QUANTILE_LEVELS[k] quantile of coordinate j.
    pub quantiles: Vec<[f64; 5]>,
    pub n_samples: usize,
}

/// Moments and empirical type-7 quantiles of an N x d sample matrix
/// (rows are draws). Deterministic; row order does not matter.
pub fn summarize(samples: &DMatrix<f64>) -> Result<PosteriorSummary> {
    let n = samples.nrows();
    let d = samples.ncols();
    if n < 2 {
        return Err(Error::DegenerateData(format!(
            "summary needs at least 2 samples, got {n}"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior samples".into()));
    }
    // Accumulate in lexicographic row order so the summary is identical
    // (bitwise) under any permutation of the input rows.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        (0..d)
            .map(|j| (samples[(a, j)], samples[(b, j)]))
            .find_map(|(x, y)| x.partial_cmp(&y).filter(|o| o.is_ne()))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = DVector::zeros(d);
    for &r in &order {
        for j in 0..d {
            mean[j] += samples[(r, j)];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for &r in &order {
        let centered = DVector::from_fn(d, |j, _| samples[(r, j)] - mean[j]);
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    symmetrize(&mut cov);

    let quantiles = (0..d)
        .map(|j| {
            let mut col: Vec<f64> = samples.column(j).iter().copied().collect();
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
            QUANTILE_LEVELS.map(|p| type7_quantile(&col, p))
        })
        .collect();
    Ok(PosteriorSummary { mean, cov, quantiles, n_samples: n })
}

/// Type-7 empirical quantile (linear interpolation at h = (n-1)p) of an
/// already-sorted slice.
fn type7_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Mahalanobis distance sqrt((point-m)' C^{-1} (point-m)) of a point from a
/// sample cloud, with m and C the sample mean and covariance (N-1). More
/// rows than dimensions are required; a covariance that stays singular
/// after jitter is an error.
pub fn mahalanobis(point: &DVector<f64>, samples: &DMatrix<f64>) -> Result<f64> {
    let n = samples.nrows();
    let d = samples.ncols();
    if point.len() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: point.len(),
            context: "mahalanobis point".into(),
        });
    }
    if n <= d {
        return Err(Error::DegenerateData(format!(
            "mahalanobis needs more samples than dimensions, got {n} x {d}"
        )));
    }
    let summary = summarize(samples)?;
    let chol = robust_cholesky(&summary.cov).map_err(|_| Error::SingularCovariance)?;
    let diff = point - &summary.mean;
    let solved = chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

/// Posterior predictive check for one observation: per-statistic predictive
/// mean/SD over networks simulated at each posterior draw, and z-scores of
/// the observed statistics. With a single draw the SD is undefined and both
/// `predictive_sd` and `z_scores` are None.
#[derive(Clone, Debug)]
pub struct PpcResult {
    /// Observed statistics, in the model's term order.
    pub observed: DVector<f64>,
    pub predictive_mean: DVector<f64>,
    pub predictive_sd: Option<DVector<f64>>,
    /// (observed - mean) / sd; finite wherever sd > 0.
    pub z_scores: Option<DVector<f64>>,
    pub n_draws: usize,
}

impl PpcResult {
    /// Largest |z|; None when z-scores are unavailable (single draw).
    pub fn max_abs_z(&self) -> Option<f64> {
        self.z_scores
            .as_ref()
            .map(|z| z.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }
}

/// Simulates one network per posterior draw (rows of `theta_samples`) and
/// compares the observed statistics against the predictive distribution.
/// `sim.seed` drives the batch; the cost is one simulation per draw.
pub fn posterior_predictive(
    observed: &SummaryStats,
    theta_samples: &DMatrix<f64>,
    model: &ErgmModel,
    sim: &SimConfig,
) -> Result<PpcResult> {
    let s = theta_samples.nrows();
    let d = model.dim();
    if s < 1 {
        return Err(Error::DegenerateData(
            "posterior predictive needs at least one draw".into(),
        ));
    }
    if theta_samples.ncols() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: theta_samples.ncols(),
            context: "posterior predictive theta samples".into(),
        });
    }
    let params: Vec<ErgmParams> = (0..s)
        .map(|r| ErgmParams::new(DVector::from_fn(d, |j, _| theta_samples[(r, j)])))
        .collect::<Result<_>>()?;
    let stats = simulate_stats_batch(model, &params, sim);
    let sims: Vec<DVector<f64>> = stats.iter().map(|st| st.select(&model.terms)).collect();

    let mean = DVector::from_fn(d, |j, _| sims.iter().map(|v| v[j]).sum::<f64>() / s as f64);
    let observed_vec = observed.select(&model.terms);
    if s == 1 {
        return Ok(PpcResult {
            observed: observed_vec,
            predictive_mean: mean,
            predictive_sd: None,
            z_scores: None,
            n_draws: s,
        });
    }
    let sd = DVector::from_fn(d, |j, _| {
        let ss: f64 = sims.iter().map(|v| (v[j] - mean[j]).powi(2)).sum();
        (ss / (s - 1) as f64).sqrt()
    });
    let z = DVector::from_fn(d, |j, _| (observed_vec[j] - mean[j]) / sd[j]);
    Ok(PpcResult {
        observed: observed_vec,
        predictive_mean: mean,
        predictive_sd: Some(sd),
        z_scores: Some(z),
        n_draws: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Proposal;
    use crate::stats::summary_stats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn standard_normal_samples(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| crate::gauss::sample_std_normal_vec(1, &mut rng)[0])
    }

    #[test]
    fn summarize_constant_samples() {
        let samples = DMatrix::from_element(10, 2, 3.5);
        let s = summarize(&samples).unwrap();
        assert_eq!(s.n_samples, 10);
        assert!(s.cov.iter().all(|&v| v == 0.0));
        for q in &s.quantiles {
            assert!(q.iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn summarize_is_permutation_invariant_and_quantiles_monotone() {
        let samples = standard_normal_samples(500, 2, 1);
        let s1 = summarize(&samples).unwrap();

        // Reverse the row order.
        let n = samples.nrows();
        let reversed = DMatrix::from_fn(n, 2, |i, j| samples[(n - 1 - i, j)]);
        let s2 = summarize(&reversed).unwrap();
        assert_eq!(s1.mean, s2.mean);
        assert_eq!(s1.cov, s2.cov);
        assert_eq!(s1.quantiles, s2.quantiles);
        for q in &s1.quantiles {
            for w in q.windows(2) {
                assert!(w[0] <= w[1], "quantiles must be monotone: {q:?}");
            }
        }
        // Median brackets the mean for roughly symmetric draws.
        assert!((s1.quantiles[0][2] - s1.mean[0]).abs() < 0.2);
    }

    #[test]
    fn type7_matches_hand_values() {
        // Sorted data 1..4: the 25% type-7 quantile is at h = 0.75,
        // i.e. 1 + 0.75*(2-1) = 1.75; the median is 2.5.
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(type7_quantile(&sorted, 0.25), 1.75);
        assert_eq!(type7_quantile(&sorted, 0.5), 2.5);
        assert_eq!(type7_quantile(&sorted, 0.0), 1.0);
        assert_eq!(type7_quantile(&sorted, 1.0), 4.0);
    }

    #[test]
    fn mahalanobis_at_mean_is_zero_and_unit_offset_is_one() {
        // Two-point symmetric cloud per coordinate has identity covariance
        // when scaled: build samples with exact mean 0 and covariance I.
        let mut samples = DMatrix::zeros(4, 2);
        samples[(0, 0)] = 1.0;
        samples[(1, 0)] = -1.0;
        samples[(2, 1)] = 1.0;
        samples[(3, 1)] = -1.0;
        // Sample covariance = (2/3) I; rescale rows so it is exactly I.
        let samples = samples * (3.0f64 / 2.0).sqrt();

        let s = summarize(&samples).unwrap();
        assert!((s.cov[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((s.cov[(1, 1)] - 1.0).abs() < 1e-12);

        let mean = s.mean.clone();
        assert!(mahalanobis(&mean, &samples).unwrap() < 1e-12);
        let offset = &mean + DVector::from_vec(vec![1.0, 0.0]);
        let d = mahalanobis(&offset, &samples).unwrap();
        assert!((d - 1.0).abs() < 1e-10, "got {d}");
    }

    #[test]
    fn mahalanobis_requires_more_samples_than_dims() {
        let samples = DMatrix::zeros(2, 2);
        let p = DVector::zeros(2);
        assert!(mahalanobis(&p, &samples).is_err());
    }

    #[test]
    fn ppc_single_draw_omits_z() {
        let model = ErgmModel::edges_only(8);
        let g = crate::graph::Graph::complete(8);
        let observed = summary_stats(&g, model.tau);
        let thetas = DMatrix::from_element(1, 1, 0.0);
        let sim = SimConfig {
            burn_in: 200,
            thin: 1,
            proposal: Proposal::TieNoTie,
            seed: 3,
        };
        let r = posterior_predictive(&observed, &thetas, &model, &sim).unwrap();
        assert_eq!(r.n_draws, 1);
        assert!(r.predictive_sd.is_none());
        assert!(r.z_scores.is_none());
        assert!(r.max_abs_z().is_none());
    }

    #[test]
    fn ppc_edges_mean_matches_binomial() {
        // theta = 0 makes every dyad an independent fair coin, so the
        // predictive mean edge count over 10 nodes is 45/2 = 22.5.
        let model = ErgmModel::edges_only(10);
        let g = crate::graph::Graph::empty(10);
        let observed = summary_stats(&g, model.tau);
        let s = 400;
        let thetas = DMatrix::zeros(s, 1);
        let sim = SimConfig {
            burn_in: 900,
            thin: 1,
            proposal: Proposal::TieNoTie,
            seed: 17,
        };
        let r = posterior_predictive(&observed, &thetas, &model, &sim).unwrap();
        assert!(
            (r.predictive_mean[0] - 22.5).abs() < 1.0,
            "predictive mean {}",
            r.predictive_mean[0]
        );
        let sd = r.predictive_sd.unwrap();
        // Binomial(45, 1/2) SD is sqrt(45)/2 = 3.354.
        assert!((sd[0] - 3.354).abs() < 0.8, "predictive sd {}", sd[0]);
        // Observed 0 edges is far in the left tail.
        assert!(r.z_scores.unwrap()[0] < -3.0);
    }
}
