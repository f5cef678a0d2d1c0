//! Mixture-of-Normals proposal with per-round component bookkeeping.
//!
//! Components are identified by their origin round tag, not by position:
//! the schedule discards the initial wide-coverage component mid-run.
//! Implied weights are n_pairs / N, so appending or removing a component
//! renormalises every weight automatically. All updates return a new value.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{log_sum_exp, Mvn};

/// Origin label of a mixture component and its training pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundTag {
    Initial,
    Round(u32),
    Refined,
}

impl fmt::Display for RoundTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundTag::Initial => write!(f, "initial"),
            RoundTag::Round(t) => write!(f, "round {t}"),
            RoundTag::Refined => write!(f, "refined"),
        }
    }
}

/// One Normal component plus the number of training pairs drawn from it.
#[derive(Clone, Debug)]
pub struct MixtureComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    mvn: Mvn,
    n_pairs: usize,
    tag: RoundTag,
}

impl MixtureComponent {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>, n_pairs: usize, tag: RoundTag) -> Result<Self> {
        let mvn = Mvn::new(mean.clone(), &cov).map_err(|e| match e {
            Error::NotPositiveDefinite { .. } => Error::NotPositiveDefinite {
                context: Some(format!("covariance of component {tag}")),
            },
            other => other,
        })?;
        Ok(MixtureComponent {
            mean,
            cov,
            mvn,
            n_pairs,
            tag,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn n_pairs(&self) -> usize {
        self.n_pairs
    }

    pub fn tag(&self) -> RoundTag {
        self.tag
    }
}

/// Weighted mixture of Normals; weights are implied by pair counts.
#[derive(Clone, Debug, Default)]
pub struct ProposalMixture {
    components: Vec<MixtureComponent>,
}

impl ProposalMixture {
    pub fn empty() -> Self {
        ProposalMixture {
            components: Vec::new(),
        }
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Total pair count N.
    pub fn total_pairs(&self) -> usize {
        self.components.iter().map(|c| c.n_pairs).sum()
    }

    /// Implied weights n_pairs / N, in component order.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.total_pairs() as f64;
        self.components
            .iter()
            .map(|c| c.n_pairs as f64 / n)
            .collect()
    }

    pub fn has_tag(&self, tag: RoundTag) -> bool {
        self.components.iter().any(|c| c.tag == tag)
    }

    pub fn component(&self, tag: RoundTag) -> Option<&MixtureComponent> {
        self.components.iter().find(|c| c.tag == tag)
    }

    /// Appends a component; every implied weight renormalises through N.
    /// Tags must be unique so removal stays well-defined.
    pub fn add_component(
        &self,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        n_pairs: usize,
        tag: RoundTag,
    ) -> Result<ProposalMixture> {
        if self.has_tag(tag) {
            return Err(Error::InvalidConfig(format!(
                "mixture already has a component tagged {tag}"
            )));
        }
        if let Some(first) = self.components.first() {
            if first.mean.len() != mean.len() {
                return Err(Error::DimMismatch {
                    expected: first.mean.len(),
                    got: mean.len(),
                    context: "mixture component mean".into(),
                });
            }
        }
        let mut components = self.components.clone();
        components.push(MixtureComponent::new(mean, cov, n_pairs, tag)?);
        Ok(ProposalMixture { components })
    }

    /// Removes the component tagged `tag`, returning the new mixture and the
    /// removed pair count so the caller can drop the matching training pairs.
    pub fn remove_component(&self, tag: RoundTag) -> Result<(ProposalMixture, usize)> {
        let idx = self
            .components
            .iter()
            .position(|c| c.tag == tag)
            .ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
        let mut components = self.components.clone();
        let removed = components.remove(idx);
        Ok((ProposalMixture { components }, removed.n_pairs))
    }

    /// log Σ_t (n_pairs_t / N) N(θ; mean_t, cov_t), via log-sum-exp.
    pub fn log_density(&self, theta: &DVector<f64>) -> Result<f64> {
        let n = self.total_pairs();
        if n == 0 {
            return Err(Error::EmptyMixture);
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.n_pairs > 0)
            .map(|c| (c.n_pairs as f64 / n as f64).ln() + c.mvn.log_pdf(theta))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn density(&self, theta: &DVector<f64>) -> Result<f64> {
        self.log_density(theta).map(f64::exp)
    }
}

/// i.i.d. draws from a single Normal component. The update scheme draws new
/// training pairs from the latest component only, never the whole mixture.
pub fn sample_component(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<DVector<f64>>> {
    let mvn = Mvn::new(mean.clone(), cov)?;
    Ok((0..n).map(|_| mvn.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::LN_2PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn id(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    #[test]
    fn single_standard_component_density_at_origin() {
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(3), id(3), 100, RoundTag::Initial)
            .unwrap();
        let got = p.density(&DVector::zeros(3)).unwrap();
        let expected = (-1.5 * LN_2PI).exp();
        assert!((got - expected).abs() < 1e-15);
        assert_eq!(p.weights(), vec![1.0]);
    }

    #[test]
    fn two_equal_components_average_their_densities() {
        let m1 = DVector::from_row_slice(&[0.0]);
        let m2 = DVector::from_row_slice(&[2.0]);
        let p = ProposalMixture::empty()
            .add_component(m1.clone(), id(1), 500, RoundTag::Initial)
            .unwrap()
            .add_component(m2.clone(), id(1), 500, RoundTag::Round(1))
            .unwrap();
        let theta = DVector::from_row_slice(&[0.7]);
        let n1 = Mvn::new(m1, &id(1)).unwrap().log_pdf(&theta).exp();
        let n2 = Mvn::new(m2, &id(1)).unwrap().log_pdf(&theta).exp();
        assert!((p.density(&theta).unwrap() - 0.5 * (n1 + n2)).abs() < 1e-14);
    }

    #[test]
    fn initial_plus_first_round_weights() {
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(2), id(2) * 10.0, 100_000, RoundTag::Initial)
            .unwrap()
            .add_component(DVector::zeros(2), id(2), 20_000, RoundTag::Round(1))
            .unwrap();
        let w = p.weights();
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(p.total_pairs(), 120_000);
    }

    #[test]
    fn removing_the_initial_component_renormalises() {
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(1), id(1), 100_000, RoundTag::Initial)
            .unwrap()
            .add_component(DVector::zeros(1), id(1), 20_000, RoundTag::Round(1))
            .unwrap()
            .add_component(DVector::zeros(1), id(1), 20_000, RoundTag::Round(2))
            .unwrap();
        let (q, removed) = p.remove_component(RoundTag::Initial).unwrap();
        assert_eq!(removed, 100_000);
        assert_eq!(q.weights(), vec![0.5, 0.5]);
        assert!(!q.has_tag(RoundTag::Initial));
    }

    #[test]
    fn remove_only_component_leaves_empty_mixture() {
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(1), id(1), 10, RoundTag::Initial)
            .unwrap();
        let (q, removed) = p.remove_component(RoundTag::Initial).unwrap();
        assert_eq!(removed, 10);
        assert_eq!(q.total_pairs(), 0);
        assert!(matches!(
            q.log_density(&DVector::zeros(1)),
            Err(Error::EmptyMixture)
        ));
    }

    #[test]
    fn remove_then_readd_restores_the_density() {
        let mean = DVector::from_row_slice(&[1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(2), id(2), 300, RoundTag::Initial)
            .unwrap()
            .add_component(mean.clone(), cov.clone(), 700, RoundTag::Round(1))
            .unwrap();
        let (q, n) = p.remove_component(RoundTag::Round(1)).unwrap();
        let r = q.add_component(mean, cov, n, RoundTag::Round(1)).unwrap();
        let theta = DVector::from_row_slice(&[0.5, -0.5]);
        assert!((p.density(&theta).unwrap() - r.density(&theta).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unknown_tag_is_an_error() {
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(1), id(1), 10, RoundTag::Initial)
            .unwrap();
        assert!(matches!(
            p.remove_component(RoundTag::Refined),
            Err(Error::UnknownTag(_))
        ));
        assert!(p
            .add_component(DVector::zeros(1), id(1), 5, RoundTag::Initial)
            .is_err());
    }

    #[test]
    fn far_tail_density_is_positive_and_finite() {
        let p = ProposalMixture::empty()
            .add_component(DVector::zeros(1), id(1), 100, RoundTag::Initial)
            .unwrap();
        let d = p.density(&DVector::from_row_slice(&[30.0])).unwrap();
        assert!(d.is_finite());
        assert!(d >= 0.0);
        assert!(p
            .log_density(&DVector::from_row_slice(&[30.0]))
            .unwrap()
            .is_finite());
    }

    #[test]
    fn sample_component_moments_and_determinism() {
        let mean = DVector::from_row_slice(&[1.0, -1.0]);
        let cov = id(2);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let draws = sample_component(&mean, &cov, 100_000, &mut rng).unwrap();
        let emp = draws.iter().sum::<DVector<f64>>() / draws.len() as f64;
        assert!((emp[0] - 1.0).abs() < 0.02);
        assert!((emp[1] + 1.0).abs() < 0.02);

        let mut rng2 = ChaCha12Rng::seed_from_u64(4);
        let again = sample_component(&mean, &cov, 3, &mut rng2).unwrap();
        assert_eq!(draws[0], again[0]);
    }

    #[test]
    fn zero_covariance_samples_at_the_jitter_floor() {
        let mean = DVector::from_row_slice(&[2.0]);
        let cov = DMatrix::zeros(1, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let draws = sample_component(&mean, &cov, 100, &mut rng).unwrap();
        for d in draws {
            assert!((d[0] - 2.0).abs() < 1e-3);
        }
    }
}
