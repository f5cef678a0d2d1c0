//! Dense multivariate Normal and inverse-Wishart primitives shared by the
//! proposal mixture, the reference samplers, and the EM driver.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Cholesky factorisation with escalating diagonal jitter, starting at
/// 1e-9 relative to the mean diagonal magnitude. Covariances assembled from
/// Monte-Carlo moments are often semidefinite to rounding; the jitter keeps
/// them usable without hiding genuinely indefinite input (which still fails
/// after escalation).
pub fn robust_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    assert_eq!(m.nrows(), m.ncols(), "covariance must be square");
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let scale = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n.max(1) as f64;
    // Escalation stops at 1e-5 relative: enough for moment matrices that are
    // semidefinite to rounding, far too small to mask real indefiniteness.
    let mut jitter = 1e-9 * if scale > 0.0 { scale } else { 1.0 };
    for _ in 0..5 {
        let mut mj = m.clone();
        for i in 0..n {
            mj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(mj) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite { context: None })
}

/// Multivariate Normal with a precomputed Cholesky factor.
#[derive(Clone, Debug)]
pub struct Mvn {
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl Mvn {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::DimMismatch {
                expected: mean.len(),
                got: cov.nrows(),
                context: "Normal covariance".into(),
            });
        }
        let chol = robust_cholesky(cov)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Mvn {
            mean,
            chol,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor is nonsingular");
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + z.norm_squared())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let eps = sample_std_normal_vec(self.dim(), rng);
        &self.mean + self.chol.l_dirty().lower_triangle() * eps
    }
}

/// Vector of i.i.d. standard Normals.
pub fn sample_std_normal_vec(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}

/// log(Σ exp(v_i)), stable against overflow; -inf for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Replaces `m` with its symmetric part (m + mᵀ)/2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// One draw from the inverse-Wishart with scale `psi` and `nu` degrees of
/// freedom (density ∝ |Σ|^{-(ν+d+1)/2} exp(-tr(ΨΣ⁻¹)/2)), via the Bartlett
/// decomposition of the Wishart(Ψ⁻¹, ν) precision draw.
pub fn sample_inverse_wishart(
    psi: &DMatrix<f64>,
    nu: f64,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    if nu <= (d - 1) as f64 {
        return Err(Error::InvalidConfig(format!(
            "inverse-Wishart needs nu > d - 1, got nu = {nu}, d = {d}"
        )));
    }
    let psi_inv = robust_cholesky(psi)?.inverse();
    let l = robust_cholesky(&psi_inv)?.l_dirty().lower_triangle();

    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).expect("positive degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let b = l * a;
    let w = &b * b.transpose();
    let mut sigma = robust_cholesky(&w)?.inverse();
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// One draw (theta, Sigma) from the Normal-inverse-Wishart:
/// Sigma ~ IW(psi, nu), theta | Sigma ~ N(mu, Sigma / kappa).
pub fn sample_niw(
    mu: &DVector<f64>,
    kappa: f64,
    psi: &DMatrix<f64>,
    nu: f64,
    rng: &mut impl Rng,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if kappa <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "NIW needs kappa > 0, got {kappa}"
        )));
    }
    let sigma = sample_inverse_wishart(psi, nu, rng)?;
    let theta = Mvn::new(mu.clone(), &(&sigma / kappa))?.sample(rng);
    Ok((theta, sigma))
}
