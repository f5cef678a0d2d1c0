//! Conditional density estimators q(theta | x): a mixture density network
//! and a masked autoregressive flow over a small reverse-mode
//! differentiation tape, trained by maximum likelihood or by the atomic
//! contrastive loss against a tractable proposal.
//!
//! Both theta and x are z-score standardized internally (summary-statistic
//! scales differ by orders of magnitude); [`Estimator::log_prob`] reports
//! densities in original coordinates, Jacobian included.

mod maf;
mod mdn;
mod tape;
mod train;

pub use train::{atomic_loss, fit_npe, fit_snpe_atomic, FitReport, TrainConfig};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::maf::MafNet;
use crate::flow::mdn::MdnNet;
use crate::flow::tape::{NodeId, Tape};

/// Estimator family and its family-specific size knob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorKind {
    Mdn { n_components: usize },
    Maf { n_transforms: usize },
}

/// Architecture description; fixed for the lifetime of an estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub hidden_units: usize,
    pub theta_dim: usize,
    pub context_dim: usize,
}

impl EstimatorSpec {
    pub fn mdn(n_components: usize, hidden_units: usize, theta_dim: usize, context_dim: usize) -> Self {
        EstimatorSpec { kind: EstimatorKind::Mdn { n_components }, hidden_units, theta_dim, context_dim }
    }

    pub fn maf(n_transforms: usize, hidden_units: usize, theta_dim: usize, context_dim: usize) -> Self {
        EstimatorSpec { kind: EstimatorKind::Maf { n_transforms }, hidden_units, theta_dim, context_dim }
    }

    pub fn validate(&self) -> Result<()> {
        let size_knob = match self.kind {
            EstimatorKind::Mdn { n_components } => n_components,
            EstimatorKind::Maf { n_transforms } => n_transforms,
        };
        if self.theta_dim == 0 || self.context_dim == 0 || self.hidden_units == 0 || size_knob == 0 {
            return Err(Error::InvalidConfig(format!(
                "estimator dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    fn net(&self) -> Net {
        match self.kind {
            EstimatorKind::Mdn { n_components } => {
                Net::Mdn(MdnNet::new(self.theta_dim, self.context_dim, self.hidden_units, n_components))
            }
            EstimatorKind::Maf { n_transforms } => {
                Net::Maf(MafNet::new(self.theta_dim, self.context_dim, self.hidden_units, n_transforms))
            }
        }
    }
}

enum Net {
    Mdn(MdnNet),
    Maf(MafNet),
}

impl Net {
    fn param_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Net::Mdn(n) => n.param_shapes(),
            Net::Maf(n) => n.param_shapes(),
        }
    }

    fn bias_params(&self) -> Vec<usize> {
        match self {
            Net::Mdn(n) => n.bias_params(),
            Net::Maf(n) => n.bias_params(),
        }
    }

    fn log_prob_plain(&self, params: &[DMatrix<f64>], theta: &DMatrix<f64>, x: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Net::Mdn(n) => n.log_prob_plain(params, theta, x),
            Net::Maf(n) => n.log_prob_plain(params, theta, x),
        }
    }

    fn log_prob_tape(&self, tape: &mut Tape, params: &[NodeId], theta: NodeId, x: NodeId) -> NodeId {
        match self {
            Net::Mdn(n) => n.log_prob_tape(tape, params, theta, x),
            Net::Maf(n) => n.log_prob_tape(tape, params, theta, x),
        }
    }

    fn sample_std(&self, params: &[DMatrix<f64>], x_row: &DVector<f64>, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        match self {
            Net::Mdn(net) => net.sample_std(params, x_row, n, rng),
            Net::Maf(net) => net.sample_std(params, x_row, n, rng),
        }
    }
}

/// Per-coordinate z-scoring of theta and x, fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    theta_mean: Vec<f64>,
    theta_sd: Vec<f64>,
    x_mean: Vec<f64>,
    x_sd: Vec<f64>,
}

const MIN_SD: f64 = 1e-12;

fn column_moments(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    let mut sds = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let col = m.column(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        sds.push(var.sqrt());
    }
    (means, sds)
}

impl Standardizer {
    /// Fit means and standard deviations column-wise; near-constant
    /// coordinates cannot be standardized and are rejected.
    pub fn fit(thetas: &DMatrix<f64>, xs: &DMatrix<f64>) -> Result<Self> {
        if thetas.nrows() == 0 || thetas.nrows() != xs.nrows() {
            return Err(Error::DimMismatch {
                expected: thetas.nrows(),
                got: xs.nrows(),
                context: "standardizer training rows".into(),
            });
        }
        let (theta_mean, theta_sd) = column_moments(thetas);
        let (x_mean, x_sd) = column_moments(xs);
        for (label, sds) in [("theta", &theta_sd), ("x", &x_sd)] {
            if let Some(j) = sds.iter().position(|s| !s.is_finite() || *s < MIN_SD) {
                return Err(Error::DegenerateData(format!(
                    "{label} coordinate {j} is (near-)constant, sd = {}",
                    sds[j]
                )));
            }
        }
        Ok(Standardizer { theta_mean, theta_sd, x_mean, x_sd })
    }

    /// No-op standardizer (zero means, unit scales).
    pub fn identity(theta_dim: usize, context_dim: usize) -> Self {
        Standardizer {
            theta_mean: vec![0.0; theta_dim],
            theta_sd: vec![1.0; theta_dim],
            x_mean: vec![0.0; context_dim],
            x_sd: vec![1.0; context_dim],
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_mean.len()
    }

    pub fn context_dim(&self) -> usize {
        self.x_mean.len()
    }

    /// Log-density correction from theta-space scaling: -sum ln sd_theta.
    pub fn log_jacobian(&self) -> f64 {
        -self.theta_sd.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn validate(&self) -> Result<()> {
        let all = self
            .theta_mean
            .iter()
            .chain(&self.theta_sd)
            .chain(&self.x_mean)
            .chain(&self.x_sd);
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite("standardizer statistics".into()));
            }
        }
        if self.theta_sd.iter().chain(&self.x_sd).any(|s| *s < MIN_SD) {
            return Err(Error::DegenerateData("standardizer sd below 1e-12".into()));
        }
        Ok(())
    }

    fn std_mat(values: &DMatrix<f64>, mean: &[f64], sd: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| (values[(i, j)] - mean[j]) / sd[j])
    }

    pub(crate) fn standardize_theta(&self, thetas: &DMatrix<f64>) -> DMatrix<f64> {
        Self::std_mat(thetas, &self.theta_mean, &self.theta_sd)
    }

    pub(crate) fn standardize_x(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        Self::std_mat(xs, &self.x_mean, &self.x_sd)
    }

    pub(crate) fn standardize_x_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |j, _| (x[j] - self.x_mean[j]) / self.x_sd[j])
    }

    pub(crate) fn unstandardize_theta_mat(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| z[(i, j)] * self.theta_sd[j] + self.theta_mean[j])
    }
}

/// A trained (or deliberately constructed) conditional density estimator.
///
/// There is no untrained state: every value of this type has a complete,
/// finite parameter set and can evaluate and sample immediately.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimator {
    spec: EstimatorSpec,
    standardizer: Standardizer,
    params: Vec<DMatrix<f64>>,
}

impl Estimator {
    pub(crate) fn from_parts(
        spec: EstimatorSpec,
        standardizer: Standardizer,
        params: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        spec.validate()?;
        standardizer.validate()?;
        if standardizer.theta_dim() != spec.theta_dim || standardizer.context_dim() != spec.context_dim {
            return Err(Error::DimMismatch {
                expected: spec.theta_dim,
                got: standardizer.theta_dim(),
                context: "standardizer vs estimator spec dimensions".into(),
            });
        }
        let shapes = spec.net().param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter matrices, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, &(r, c))) in params.iter().zip(&shapes).enumerate() {
            if p.nrows() != r || p.ncols() != c {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} has shape {}x{}, expected {r}x{c}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter matrix {i}")));
            }
        }
        Ok(Estimator { spec, standardizer, params })
    }

    /// Estimator whose density is the standard Normal in standardized
    /// coordinates for every context: MDN components are N(0, I) with equal
    /// weights; MAF transforms start as the identity map.
    pub fn with_reference_params(spec: EstimatorSpec, standardizer: Standardizer) -> Result<Self> {
        spec.validate()?;
        let net = spec.net();
        let mut params: Vec<DMatrix<f64>> =
            net.param_shapes().into_iter().map(|(r, c)| DMatrix::zeros(r, c)).collect();
        if let Net::Mdn(mdn) = &net {
            let (_, diag_biases) = mdn.identity_start_params();
            for i in diag_biases {
                params[i].fill(MdnNet::unit_diag_bias());
            }
        }
        Estimator::from_parts(spec, standardizer, params)
    }

    /// Estimator with small random parameters everywhere; intended for
    /// gradient diagnostics, not as a useful density.
    pub fn with_random_params(spec: EstimatorSpec, standardizer: Standardizer, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = spec
            .net()
            .param_shapes()
            .into_iter()
            .map(|(r, c)| {
                DMatrix::from_fn(r, c, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    0.3 * v
                })
            })
            .collect();
        Estimator::from_parts(spec, standardizer, params)
    }

    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub(crate) fn params(&self) -> &[DMatrix<f64>] {
        &self.params
    }

    fn check_dims(&self, theta_len: usize, x_len: usize) -> Result<()> {
        if theta_len != self.spec.theta_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.theta_dim,
                got: theta_len,
                context: "theta dimension".into(),
            });
        }
        if x_len != self.spec.context_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.context_dim,
                got: x_len,
                context: "context dimension".into(),
            });
        }
        Ok(())
    }

    /// Log density of theta given context x, in original coordinates
    /// (standardization Jacobian included).
    pub fn log_prob(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_dims(theta.len(), x.len())?;
        let t = DMatrix::from_row_slice(1, theta.len(), theta.as_slice());
        let c = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        Ok(self.log_prob_batch(&t, &c)?[0])
    }

    /// Row-wise log densities for matched (theta, x) rows.
    pub fn log_prob_batch(&self, thetas: &DMatrix<f64>, xs: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dims(thetas.ncols(), xs.ncols())?;
        if thetas.nrows() != xs.nrows() {
            return Err(Error::DimMismatch {
                expected: thetas.nrows(),
                got: xs.nrows(),
                context: "log_prob_batch rows".into(),
            });
        }
        let tz = self.standardizer.standardize_theta(thetas);
        let xz = self.standardizer.standardize_x(xs);
        let mut lp = self.spec.net().log_prob_plain(&self.params, &tz, &xz);
        let jac = self.standardizer.log_jacobian();
        lp.iter_mut().for_each(|v| *v += jac);
        Ok(lp)
    }

    /// n draws from q(. | x), one per row, in original coordinates.
    pub fn sample(&self, x: &DVector<f64>, n: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
        self.check_dims(self.spec.theta_dim, x.len())?;
        let xz = self.standardizer.standardize_x_vec(x);
        let z = self.spec.net().sample_std(&self.params, &xz, n, rng);
        Ok(self.standardizer.unstandardize_theta_mat(&z))
    }

    /// Numerical invertibility check for flow estimators: draws base noise,
    /// maps it through the inverse transform stack at each context row of
    /// `xs`, maps the result forward again, and returns the largest
    /// absolute reconstruction error. Mixture estimators have no inverse
    /// map and are rejected.
    pub fn flow_round_trip_error(
        &self,
        xs: &DMatrix<f64>,
        draws_per_context: usize,
        seed: u64,
    ) -> Result<f64> {
        let Net::Maf(net) = self.spec.net() else {
            return Err(Error::InvalidConfig(
                "round-trip check applies to flow estimators only".into(),
            ));
        };
        if xs.ncols() != self.spec.context_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.context_dim,
                got: xs.ncols(),
                context: "round-trip contexts".into(),
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for r in 0..xs.nrows() {
            let x_row = DVector::from_fn(xs.ncols(), |j, _| xs[(r, j)]);
            let xz_row = self.standardizer.standardize_x_vec(&x_row);
            let xz = DMatrix::from_fn(draws_per_context, xz_row.len(), |_, j| xz_row[j]);
            let z = DMatrix::from_fn(draws_per_context, self.spec.theta_dim, |_, _| {
                crate::gauss::sample_std_normal_vec(1, &mut rng)[0]
            });
            let theta = net.invert_std(&self.params, z.clone(), &xz);
            let back = net.forward_std(&self.params, &theta, &xz);
            for (a, b) in z.iter().zip(back.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }

    /// Compare the reverse-mode gradient of log_prob at (theta, x) with
    /// central finite differences over every parameter entry; returns the
    /// largest relative error. Entries whose analytic and numeric gradients
    /// are both (near) zero contribute zero.
    pub fn grad_check(&self, theta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        const FD_STEP: f64 = 1e-5;
        self.check_dims(theta.len(), x.len())?;
        let tz = self.standardizer.standardize_theta(&DMatrix::from_row_slice(1, theta.len(), theta.as_slice()));
        let xz = self.standardizer.standardize_x(&DMatrix::from_row_slice(1, x.len(), x.as_slice()));
        let net = self.spec.net();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let tn = tape.leaf(tz.clone());
        let xn = tape.leaf(xz.clone());
        let col = net.log_prob_tape(&mut tape, &ids, tn, xn);
        let root = tape.mean_all(col);
        let grads = tape.backward(root);

        let mut work = self.params.clone();
        let mut max_rel: f64 = 0.0;
        for (pi, id) in ids.iter().enumerate() {
            let g = grads[id.index()].as_ref().expect("parameter leaf requires grad");
            for r in 0..work[pi].nrows() {
                for c in 0..work[pi].ncols() {
                    let orig = work[pi][(r, c)];
                    work[pi][(r, c)] = orig + FD_STEP;
                    let up = net.log_prob_plain(&work, &tz, &xz)[0];
                    work[pi][(r, c)] = orig - FD_STEP;
                    let down = net.log_prob_plain(&work, &tz, &xz)[0];
                    work[pi][(r, c)] = orig;
                    let fd = (up - down) / (2.0 * FD_STEP);
                    let a = g[(r, c)];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        Ok(max_rel)
    }

    /// Serialize to the versioned JSON checkpoint format. Finite f64 values
    /// survive a serialize/parse round trip bitwise.
    pub fn to_json(&self) -> Result<String> {
        let dto = CheckpointDto {
            format_version: CHECKPOINT_VERSION,
            spec: self.spec,
            standardizer: self.standardizer.clone(),
            params: self
                .params
                .iter()
                .map(|p| MatrixDto {
                    rows: p.nrows(),
                    cols: p.ncols(),
                    // Row-major for human readability.
                    data: (0..p.nrows()).flat_map(|i| p.row(i).iter().copied().collect::<Vec<_>>()).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&dto).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dto: CheckpointDto =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("parse failure: {e}")))?;
        if dto.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (this build reads {CHECKPOINT_VERSION})",
                dto.format_version
            )));
        }
        let params = dto
            .params
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                if m.data.len() != m.rows * m.cols {
                    return Err(Error::Checkpoint(format!(
                        "parameter {i}: {} values for a {}x{} matrix",
                        m.data.len(),
                        m.rows,
                        m.cols
                    )));
                }
                Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
            })
            .collect::<Result<Vec<_>>>()?;
        Estimator::from_parts(dto.spec, dto.standardizer, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixDto {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDto {
    format_version: u32,
    spec: EstimatorSpec,
    standardizer: Standardizer,
    params: Vec<MatrixDto>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::LN_2PI;

    #[test]
    fn reference_mdn_is_standard_normal_at_the_mode() {
        let spec = EstimatorSpec::mdn(1, 8, 2, 3);
        let est = Estimator::with_reference_params(spec, Standardizer::identity(2, 3)).unwrap();
        let lp = est
            .log_prob(&DVector::zeros(2), &DVector::from_vec(vec![1.0, -2.0, 0.5]))
            .unwrap();
        assert!((lp - (-LN_2PI)).abs() < 1e-12);
    }

    #[test]
    fn reference_maf_matches_base_normal_density() {
        let spec = EstimatorSpec::maf(5, 32, 3, 2);
        let est = Estimator::with_reference_params(spec, Standardizer::identity(3, 2)).unwrap();
        let theta = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let x = DVector::from_vec(vec![9.0, -9.0]);
        let lp = est.log_prob(&theta, &x).unwrap();
        let expect = -1.5 * LN_2PI - 0.5 * theta.norm_squared();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn standardizer_shifts_log_density_by_the_jacobian() {
        // N(0,I) in standardized space with theta sd (2, 4) is a Normal with
        // sds (2, 4) in original space.
        let thetas = DMatrix::from_row_slice(4, 2, &[-2.0, -4.0, 2.0, 4.0, -2.0, 4.0, 2.0, -4.0]);
        let xs = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let s = Standardizer::fit(&thetas, &xs).unwrap();
        assert!((s.log_jacobian() - -(2.0f64.ln() + 4.0f64.ln())).abs() < 1e-12);
        let est = Estimator::with_reference_params(EstimatorSpec::mdn(1, 4, 2, 1), s).unwrap();
        let lp = est
            .log_prob(&DVector::from_vec(vec![0.0, 0.0]), &DVector::from_vec(vec![1.5]))
            .unwrap();
        let expect = -LN_2PI - (2.0f64.ln() + 4.0f64.ln());
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn standardizer_rejects_constant_coordinates() {
        let thetas = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 1.0, 6.0, 1.0, 7.0]);
        let xs = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        match Standardizer::fit(&thetas, &xs) {
            Err(Error::DegenerateData(msg)) => assert!(msg.contains("theta coordinate 0")),
            other => panic!("expected DegenerateData, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let spec = EstimatorSpec::maf(3, 6, 2, 2);
        let est = Estimator::with_random_params(spec, Standardizer::identity(2, 2), 42).unwrap();
        let text = est.to_json().unwrap();
        let back = Estimator::from_json(&text).unwrap();
        assert_eq!(est, back);
        for (a, b) in est.params.iter().zip(&back.params) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_wrong_version_and_shape() {
        let spec = EstimatorSpec::mdn(2, 4, 1, 1);
        let est = Estimator::with_reference_params(spec, Standardizer::identity(1, 1)).unwrap();
        let text = est.to_json().unwrap();
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(Estimator::from_json(&bumped), Err(Error::Checkpoint(_))));
        let mut dto: serde_json::Value = serde_json::from_str(&text).unwrap();
        dto["params"][0]["rows"] = serde_json::json!(3);
        assert!(Estimator::from_json(&dto.to_string()).is_err());
    }

    #[test]
    fn grad_check_is_small_for_both_kinds() {
        let s = Standardizer::identity(2, 2);
        let theta = DVector::from_vec(vec![0.4, -0.3]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let mdn = Estimator::with_random_params(EstimatorSpec::mdn(2, 6, 2, 2), s.clone(), 5).unwrap();
        assert!(mdn.grad_check(&theta, &x).unwrap() < 1e-4);
        let maf = Estimator::with_random_params(EstimatorSpec::maf(3, 8, 2, 2), s, 6).unwrap();
        assert!(maf.grad_check(&theta, &x).unwrap() < 1e-4);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let est =
            Estimator::with_reference_params(EstimatorSpec::mdn(1, 4, 2, 3), Standardizer::identity(2, 3)).unwrap();
        assert!(est.log_prob(&DVector::zeros(3), &DVector::zeros(3)).is_err());
        assert!(est.log_prob(&DVector::zeros(2), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn flow_round_trip_is_tight_and_rejects_mixtures() {
        let s = Standardizer::identity(3, 2);
        let maf = Estimator::with_random_params(EstimatorSpec::maf(4, 16, 3, 2), s.clone(), 11).unwrap();
        let xs = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 2.0, 0.1]);
        let err = maf.flow_round_trip_error(&xs, 64, 7).unwrap();
        assert!(err < 1e-10, "round-trip error {err}");
        let mdn = Estimator::with_random_params(EstimatorSpec::mdn(2, 6, 3, 2), s, 11).unwrap();
        assert!(matches!(mdn.flow_round_trip_error(&xs, 8, 7), Err(Error::InvalidConfig(_))));
        assert!(maf.flow_round_trip_error(&DMatrix::zeros(1, 3), 8, 7).is_err());
    }
}
