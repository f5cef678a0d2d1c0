//! Normal-inverse-Wishart hyper-prior over group-level parameters
//! (theta_g, Sigma_g), its closed-form conjugate update, and the analytic
//! M-step that treats per-observation posterior moments as pseudo-data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gauss::{robust_cholesky, sample_niw, symmetrize};

/// NIW(mu0, kappa0, psi0, nu0): Sigma ~ InvWishart(psi0, nu0) and
/// theta | Sigma ~ N(mu0, Sigma / kappa0).
#[derive(Clone, Debug, PartialEq)]
pub struct NiwHyper {
    mu0: DVector<f64>,
    kappa0: f64,
    psi0: DMatrix<f64>,
    nu0: f64,
}

impl NiwHyper {
    pub fn new(mu0: DVector<f64>, kappa0: f64, psi0: DMatrix<f64>, nu0: f64) -> Result<Self> {
        let d = mu0.len();
        if d == 0 {
            return Err(Error::InvalidConfig("NIW dimension must be positive".into()));
        }
        if mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("NIW mean".into()));
        }
        if !(kappa0.is_finite() && kappa0 > 0.0) {
            return Err(Error::InvalidConfig(format!("kappa0 must be positive, got {kappa0}")));
        }
        if !(nu0.is_finite() && nu0 > d as f64 - 1.0) {
            return Err(Error::InvalidConfig(format!(
                "nu0 must exceed d - 1 = {}, got {nu0}",
                d as f64 - 1.0
            )));
        }
        if psi0.nrows() != d || psi0.ncols() != d {
            return Err(Error::DimMismatch { expected: d, got: psi0.nrows(), context: "psi0 shape".into() });
        }
        let mut psi0 = psi0;
        for i in 0..d {
            for j in (i + 1)..d {
                if (psi0[(i, j)] - psi0[(j, i)]).abs() > 1e-9 * psi0[(i, j)].abs().max(1.0) {
                    return Err(Error::NonSymmetric { i, j, delta: psi0[(i, j)] - psi0[(j, i)] });
                }
            }
        }
        symmetrize(&mut psi0);
        robust_cholesky(&psi0).map_err(|_| Error::NotPositiveDefinite { context: Some("psi0".into()) })?;
        Ok(NiwHyper { mu0, kappa0, psi0, nu0 })
    }

    /// Weakly informative default: mu0 = 0, kappa0 = 1, psi0 = d*I,
    /// nu0 = d + 2 (the smallest integer nu with a finite IW mean equal to
    /// psi0/(nu - d - 1) = d*I).
    pub fn weakly_informative(d: usize) -> Self {
        NiwHyper {
            mu0: DVector::zeros(d),
            kappa0: 1.0,
            psi0: DMatrix::identity(d, d) * d as f64,
            nu0: d as f64 + 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn psi0(&self) -> &DMatrix<f64> {
        &self.psi0
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    /// Mode of the NIW density: theta_g = mu0,
    /// Sigma_g = psi0 / (nu0 + d + 1).
    pub fn map_estimates(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim() as f64;
        (self.mu0.clone(), &self.psi0 / (self.nu0 + d + 1.0))
    }

    /// One draw of (theta_g, Sigma_g) from this NIW.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(DVector<f64>, DMatrix<f64>)> {
        sample_niw(&self.mu0, self.kappa0, &self.psi0, self.nu0, rng)
    }
}

/// Result of one analytic M-step.
#[derive(Clone, Debug)]
pub struct MStep {
    pub posterior: NiwHyper,
    /// MAP group mean, mu_n.
    pub theta_g: DVector<f64>,
    /// MAP group covariance, psi_n / (nu_n + d + 1).
    pub sigma_g: DMatrix<f64>,
}

/// Closed-form NIW update treating per-observation moments (mu_i, Sigma_i)
/// as Gaussian pseudo-data:
///
///   nu_n    = nu0 + n
///   kappa_n = kappa0 + n
///   mu_n    = (kappa0 mu0 + sum mu_i) / (kappa0 + n)
///   psi_n   = psi0 + sum[Sigma_i + (mu_i - mu_bar)(mu_i - mu_bar)']
///             + (kappa0 n / (kappa0 + n)) (mu0 - mu_bar)(mu0 - mu_bar)'
///
/// With all Sigma_i = 0 this is the ordinary conjugate update for observed
/// points {mu_i}. An empty moment list returns the prior unchanged.
pub fn m_step(prior: &NiwHyper, moments: &[(DVector<f64>, DMatrix<f64>)]) -> Result<MStep> {
    let d = prior.dim();
    if moments.is_empty() {
        let (theta_g, sigma_g) = prior.map_estimates();
        return Ok(MStep { posterior: prior.clone(), theta_g, sigma_g });
    }
    for (i, (mu, sigma)) in moments.iter().enumerate() {
        if mu.len() != d {
            return Err(Error::DimMismatch { expected: d, got: mu.len(), context: format!("moment mean {i}") });
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: sigma.nrows(),
                context: format!("moment covariance {i}"),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("moment pair {i}")));
        }
    }

    let n = moments.len() as f64;
    let mut mu_bar = DVector::zeros(d);
    for (mu, _) in moments {
        mu_bar += mu;
    }
    mu_bar /= n;

    let kappa_n = prior.kappa0 + n;
    let nu_n = prior.nu0 + n;
    let mu_n = (&prior.mu0 * prior.kappa0 + &mu_bar * n) / kappa_n;

    let mut psi_n = prior.psi0.clone();
    for (mu, sigma) in moments {
        let dev = mu - &mu_bar;
        psi_n += sigma + &dev * dev.transpose();
    }
    let dev0 = &prior.mu0 - &mu_bar;
    psi_n += (&dev0 * dev0.transpose()) * (prior.kappa0 * n / kappa_n);
    symmetrize(&mut psi_n);

    robust_cholesky(&psi_n)
        .map_err(|_| Error::NotPositiveDefinite { context: Some("psi_n after M-step".into()) })?;

    let sigma_g = &psi_n / (nu_n + d as f64 + 1.0);
    let posterior = NiwHyper { mu0: mu_n.clone(), kappa0: kappa_n, psi0: psi_n, nu0: nu_n };
    Ok(MStep { posterior, theta_g: mu_n, sigma_g })
}

/// Conjugate NIW posterior given directly observed group members
/// {theta_i} ~ N(theta_g, Sigma_g); the zero-covariance case of the M-step.
pub fn conjugate_posterior(prior: &NiwHyper, observations: &[DVector<f64>]) -> Result<NiwHyper> {
    let d = prior.dim();
    let moments: Vec<(DVector<f64>, DMatrix<f64>)> =
        observations.iter().map(|t| (t.clone(), DMatrix::zeros(d, d))).collect();
    Ok(m_step(prior, &moments)?.posterior)
}

/// The Gibbs global step: draw (theta_g, Sigma_g) from the exact NIW
/// posterior given the current local parameters.
pub fn posterior_draw_given(
    prior: &NiwHyper,
    observations: &[DVector<f64>],
    rng: &mut impl Rng,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let post = conjugate_posterior(prior, observations)?;
    post.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_one_dimensional_update() {
        let prior = NiwHyper::new(DVector::zeros(1), 1.0, DMatrix::from_element(1, 1, 1.0), 3.0).unwrap();
        let moments = vec![(DVector::from_vec(vec![2.0]), DMatrix::zeros(1, 1))];
        let out = m_step(&prior, &moments).unwrap();
        assert!((out.posterior.mu0()[0] - 1.0).abs() < 1e-14);
        assert!((out.posterior.kappa0() - 2.0).abs() < 1e-14);
        assert!((out.posterior.nu0() - 4.0).abs() < 1e-14);
        assert!((out.posterior.psi0()[(0, 0)] - 3.0).abs() < 1e-14);
        assert!((out.theta_g[0] - 1.0).abs() < 1e-14);
        assert!((out.sigma_g[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn empty_moments_return_the_prior() {
        let prior = NiwHyper::weakly_informative(3);
        let out = m_step(&prior, &[]).unwrap();
        assert_eq!(out.posterior, prior);
        assert_eq!(out.theta_g, DVector::zeros(3));
        let expect = DMatrix::identity(3, 3) * (3.0 / (3.0 + 2.0 + 3.0 + 1.0));
        assert!((out.sigma_g - expect).abs().max() < 1e-14);
    }

    #[test]
    fn vanishing_prior_strength_recovers_the_sample_mean() {
        let prior = NiwHyper::new(
            DVector::from_vec(vec![100.0, -100.0]),
            1e-8,
            DMatrix::identity(2, 2),
            3.0,
        )
        .unwrap();
        let moments = vec![
            (DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2) * 0.5),
            (DVector::from_vec(vec![3.0, 4.0]), DMatrix::identity(2, 2) * 0.5),
        ];
        let out = m_step(&prior, &moments).unwrap();
        assert!((out.theta_g[0] - 2.0).abs() < 1e-5);
        assert!((out.theta_g[1] - 3.0).abs() < 1e-5);
        // psi_n -> psi0 + sum[Sigma_i + scatter]: scatter = 2 * [1,1;1,1].
        // The kappa0 cross term is ~1e-8 * |mu0 - mu_bar|^2 ~ 1e-4.
        let expect = DMatrix::identity(2, 2) * 2.0 + DMatrix::from_element(2, 2, 2.0);
        assert!((out.posterior.psi0() - expect).abs().max() < 1e-3);
    }

    #[test]
    fn mean_update_is_a_convex_combination() {
        let (mu0, kappa0) = (-1.0, 2.5);
        let prior =
            NiwHyper::new(DVector::from_element(1, mu0), kappa0, DMatrix::identity(1, 1), 3.0).unwrap();
        let moments: Vec<_> = [0.6, 1.4, 1.0]
            .iter()
            .map(|&m| (DVector::from_vec(vec![m]), DMatrix::zeros(1, 1)))
            .collect();
        let out = m_step(&prior, &moments).unwrap();
        // mu_bar = 1.0; mu_n must lie strictly between mu0 and mu_bar.
        assert!(out.theta_g[0] > mu0 && out.theta_g[0] < 1.0);
        let expect = (kappa0 * mu0 + 3.0 * 1.0) / (kappa0 + 3.0);
        assert!((out.theta_g[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(NiwHyper::new(DVector::zeros(2), 0.0, DMatrix::identity(2, 2), 4.0).is_err());
        assert!(NiwHyper::new(DVector::zeros(2), 1.0, DMatrix::identity(2, 2), 0.9).is_err());
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(
            NiwHyper::new(DVector::zeros(2), 1.0, skew, 4.0),
            Err(Error::NonSymmetric { .. })
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(NiwHyper::new(DVector::zeros(2), 1.0, indef, 4.0).is_err());
    }

    #[test]
    fn conjugate_posterior_matches_zero_covariance_m_step() {
        let prior = NiwHyper::weakly_informative(2);
        let obs = vec![
            DVector::from_vec(vec![0.5, -0.2]),
            DVector::from_vec(vec![1.5, 0.8]),
            DVector::from_vec(vec![-0.5, 0.3]),
        ];
        let post = conjugate_posterior(&prior, &obs).unwrap();
        assert!((post.kappa0() - 4.0).abs() < 1e-14);
        assert!((post.nu0() - 7.0).abs() < 1e-14);
        let mu_bar = DVector::from_vec(vec![0.5, 0.3]);
        let expect_mu = (DVector::zeros(2) + &mu_bar * 3.0) / 4.0;
        assert!((post.mu0() - expect_mu).abs().max() < 1e-14);
    }
}
