//! Masked autoregressive flow with a Gaussian base.
//!
//! Each transform is a MADE-style masked two-layer network (tanh hidden)
//! emitting a per-coordinate shift mu and log-scale alpha (clamped to
//! [-7, 7]); the density direction maps data u to base noise
//! z = (u - mu) * exp(-alpha), contributing -sum(alpha) to the log-density.
//! The coordinate order is reversed between consecutive transforms. Context
//! feeds every hidden unit, so degree-0 hidden units carry pure context
//! information (this is what makes one-dimensional problems work).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::flow::tape::{NodeId, Tape};
use crate::gauss::{sample_std_normal_vec, LN_2PI};

const ALPHA_CLAMP: f64 = 7.0;

/// Parameters per transform, in layout order.
pub(crate) const MAF_PARAMS_PER_TRANSFORM: usize = 7;

pub(crate) struct MafNet {
    d: usize,
    m: usize,
    h: usize,
    k: usize,
    // Input->hidden mask (d x h): hidden unit degree k % d must be >= input degree j+1.
    mask1: DMatrix<f64>,
    // Hidden->output mask (h x d): output degree i+1 must exceed hidden degree.
    mask2: DMatrix<f64>,
    perms: Vec<Vec<usize>>,
}

impl MafNet {
    pub fn new(theta_dim: usize, context_dim: usize, hidden_units: usize, n_transforms: usize) -> Self {
        let (d, m, h, k) = (theta_dim, context_dim, hidden_units, n_transforms);
        let mask1 = DMatrix::from_fn(d, h, |j, u| if u % d > j { 1.0 } else { 0.0 });
        let mask2 = DMatrix::from_fn(h, d, |u, i| if u % d <= i { 1.0 } else { 0.0 });
        let identity: Vec<usize> = (0..d).collect();
        let reversed: Vec<usize> = (0..d).rev().collect();
        let perms = (0..k)
            .map(|t| {
                if t % 2 == 0 {
                    identity.clone()
                } else {
                    reversed.clone()
                }
            })
            .collect();
        MafNet { d, m, h, k, mask1, mask2, perms }
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.k * MAF_PARAMS_PER_TRANSFORM);
        for _ in 0..self.k {
            shapes.push((self.d, self.h)); // w1, masked
            shapes.push((self.m, self.h)); // v1 (context)
            shapes.push((1, self.h)); // b1
            shapes.push((self.h, self.d)); // w_mu, masked
            shapes.push((1, self.d)); // b_mu
            shapes.push((self.h, self.d)); // w_alpha, masked
            shapes.push((1, self.d)); // b_alpha
        }
        shapes
    }

    /// Indices of bias rows in `param_shapes` order. Weight matrices can
    /// also have a single row when an input dimension is 1, so callers must
    /// not infer bias-ness from shape.
    pub fn bias_params(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.k * 3);
        for t in 0..self.k {
            let base = t * MAF_PARAMS_PER_TRANSFORM;
            idx.extend([base + 2, base + 4, base + 6]);
        }
        idx
    }

    /// Indices of parameters that start at zero so the flow begins as the
    /// identity map (the output heads).
    pub fn identity_start_params(&self) -> Vec<usize> {
        let mut idx = Vec::new();
        for t in 0..self.k {
            let base = t * MAF_PARAMS_PER_TRANSFORM;
            idx.extend([base + 3, base + 4, base + 5, base + 6]);
        }
        idx
    }

    /// One MADE evaluation on plain matrices: (mu, alpha) from inputs in the
    /// transform's permuted coordinate order.
    fn made_plain(
        &self,
        p: &[DMatrix<f64>],
        u_perm: &DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let w1m = p[0].component_mul(&self.mask1);
        let mut pre = u_perm * w1m + x * &p[1];
        add_row_in_place(&mut pre, &p[2]);
        let hid = pre.map(f64::tanh);
        let w_mu = p[3].component_mul(&self.mask2);
        let mut mu = &hid * w_mu;
        add_row_in_place(&mut mu, &p[4]);
        let w_a = p[5].component_mul(&self.mask2);
        let mut alpha = &hid * w_a;
        add_row_in_place(&mut alpha, &p[6]);
        let alpha = alpha.map(|v| v.clamp(-ALPHA_CLAMP, ALPHA_CLAMP));
        (mu, alpha)
    }

    /// log q(theta | x) per row, standardized space, plain evaluation.
    pub fn log_prob_plain(
        &self,
        params: &[DMatrix<f64>],
        theta: &DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> DVector<f64> {
        let b = theta.nrows();
        let mut u = theta.clone();
        let mut logdet = DVector::zeros(b);
        for t in 0..self.k {
            let p = &params[t * MAF_PARAMS_PER_TRANSFORM..(t + 1) * MAF_PARAMS_PER_TRANSFORM];
            let perm = &self.perms[t];
            let u_perm = select_cols_plain(&u, perm);
            let (mu, alpha) = self.made_plain(p, &u_perm, x);
            let mut z_perm = DMatrix::zeros(b, self.d);
            for i in 0..b {
                for j in 0..self.d {
                    z_perm[(i, j)] = (u_perm[(i, j)] - mu[(i, j)]) * (-alpha[(i, j)]).exp();
                    logdet[i] -= alpha[(i, j)];
                }
            }
            u = select_cols_plain(&z_perm, &invert_perm(perm));
        }
        let mut out = logdet;
        for i in 0..b {
            out[i] += -0.5 * self.d as f64 * LN_2PI - 0.5 * u.row(i).norm_squared();
        }
        out
    }

    /// Tape version of [`Self::log_prob_plain`]; returns the B x 1 column.
    pub fn log_prob_tape(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        theta: NodeId,
        x: NodeId,
    ) -> NodeId {
        let mask1 = tape.leaf(self.mask1.clone());
        let mask2 = tape.leaf(self.mask2.clone());
        let mut u = theta;
        let mut logdet: Option<NodeId> = None;
        for t in 0..self.k {
            let p = &params[t * MAF_PARAMS_PER_TRANSFORM..(t + 1) * MAF_PARAMS_PER_TRANSFORM];
            let perm = &self.perms[t];
            let u_perm = tape.select_cols(u, perm.clone());
            let w1m = tape.mul(p[0], mask1);
            let a1 = tape.matmul(u_perm, w1m);
            let a2 = tape.matmul(x, p[1]);
            let pre = tape.add(a1, a2);
            let pre = tape.add_row(pre, p[2]);
            let hid = tape.tanh(pre);
            let w_mu = tape.mul(p[3], mask2);
            let mu = tape.matmul(hid, w_mu);
            let mu = tape.add_row(mu, p[4]);
            let w_a = tape.mul(p[5], mask2);
            let alpha = tape.matmul(hid, w_a);
            let alpha = tape.add_row(alpha, p[6]);
            let alpha = tape.clamp(alpha, -ALPHA_CLAMP, ALPHA_CLAMP);
            let diff = tape.sub(u_perm, mu);
            let neg_alpha = tape.neg(alpha);
            let scale = tape.exp(neg_alpha);
            let z_perm = tape.mul(diff, scale);
            u = tape.select_cols(z_perm, invert_perm(perm));
            let alpha_sum = tape.row_sum(alpha);
            logdet = Some(match logdet {
                None => tape.neg(alpha_sum),
                Some(acc) => {
                    let neg = tape.neg(alpha_sum);
                    tape.add(acc, neg)
                }
            });
        }
        let sq = tape.square(u);
        let ss = tape.row_sum(sq);
        let base = tape.scale(ss, -0.5);
        let lp = match logdet {
            Some(ld) => tape.add(base, ld),
            None => base,
        };
        tape.add_scalar(lp, -0.5 * self.d as f64 * LN_2PI)
    }

    /// n draws from q(. | x) in standardized space: sample base noise, then
    /// invert the transform stack coordinate-by-coordinate.
    pub fn sample_std(
        &self,
        params: &[DMatrix<f64>],
        x_row: &DVector<f64>,
        n: usize,
        rng: &mut impl Rng,
    ) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(n, self.d);
        for i in 0..n {
            z.set_row(i, &sample_std_normal_vec(self.d, rng).transpose());
        }
        let x = DMatrix::from_fn(n, self.m, |_, j| x_row[j]);
        self.invert_std(params, z, &x)
    }

    /// Inverse pass (base noise -> data space) for an already-built noise
    /// matrix; exposed for round-trip testing.
    pub fn invert_std(
        &self,
        params: &[DMatrix<f64>],
        z: DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let n = z.nrows();
        let mut down = z; // value after transform t, walking backwards
        for t in (0..self.k).rev() {
            let p = &params[t * MAF_PARAMS_PER_TRANSFORM..(t + 1) * MAF_PARAMS_PER_TRANSFORM];
            let perm = &self.perms[t];
            let y_perm = select_cols_plain(&down, perm);
            let mut u_perm = DMatrix::zeros(n, self.d);
            for j in 0..self.d {
                // mu[:, j], alpha[:, j] depend only on u_perm[:, <j].
                let (mu, alpha) = self.made_plain(p, &u_perm, x);
                for i in 0..n {
                    u_perm[(i, j)] = mu[(i, j)] + y_perm[(i, j)] * alpha[(i, j)].exp();
                }
            }
            down = select_cols_plain(&u_perm, &invert_perm(perm));
        }
        down
    }

    /// Forward (density-direction) map to base noise; exposed for round-trip
    /// testing.
    pub fn forward_std(
        &self,
        params: &[DMatrix<f64>],
        theta: &DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut u = theta.clone();
        for t in 0..self.k {
            let p = &params[t * MAF_PARAMS_PER_TRANSFORM..(t + 1) * MAF_PARAMS_PER_TRANSFORM];
            let perm = &self.perms[t];
            let u_perm = select_cols_plain(&u, perm);
            let (mu, alpha) = self.made_plain(p, &u_perm, x);
            let mut z_perm = DMatrix::zeros(u.nrows(), self.d);
            for i in 0..u.nrows() {
                for j in 0..self.d {
                    z_perm[(i, j)] = (u_perm[(i, j)] - mu[(i, j)]) * (-alpha[(i, j)]).exp();
                }
            }
            u = select_cols_plain(&z_perm, &invert_perm(perm));
        }
        u
    }
}

pub(crate) fn add_row_in_place(m: &mut DMatrix<f64>, row: &DMatrix<f64>) {
    debug_assert_eq!(row.nrows(), 1);
    debug_assert_eq!(m.ncols(), row.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            m[(i, j)] += row[(0, j)];
        }
    }
}

pub(crate) fn select_cols_plain(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), idx.len());
    for (k, &j) in idx.iter().enumerate() {
        out.set_column(k, &m.column(j));
    }
    out
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (k, &j) in perm.iter().enumerate() {
        inv[j] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_params(net: &MafNet, seed: u64) -> Vec<DMatrix<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        net.param_shapes()
            .iter()
            .map(|&(r, c)| {
                DMatrix::from_fn(r, c, |_, _| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    0.3 * v
                })
            })
            .collect()
    }

    #[test]
    fn zero_head_parameters_give_the_base_normal() {
        let net = MafNet::new(2, 3, 8, 4);
        let mut params = random_params(&net, 1);
        for i in net.identity_start_params() {
            params[i].fill(0.0);
        }
        let theta = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -0.5]);
        let x = DMatrix::from_row_slice(2, 3, &[0.4, -1.0, 2.0, 0.0, 0.0, 0.0]);
        let lp = net.log_prob_plain(&params, &theta, &x);
        let expect0 = -LN_2PI;
        let expect1 = -LN_2PI - 0.5 * (1.0 + 0.25);
        assert!((lp[0] - expect0).abs() < 1e-12);
        assert!((lp[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let net = MafNet::new(3, 2, 12, 3);
        let params = random_params(&net, 7);
        let theta = DMatrix::from_row_slice(4, 3, &[
            0.1, -0.2, 0.3, 1.0, 0.5, -1.5, -0.7, 0.0, 0.2, 2.0, -1.0, 0.4,
        ]);
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, -1.0, 0.5, 0.3, 0.3, 2.0, -2.0]);
        let plain = net.log_prob_plain(&params, &theta, &x);

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let tn = tape.leaf(theta.clone());
        let xn = tape.leaf(x.clone());
        let col = net.log_prob_tape(&mut tape, &ids, tn, xn);
        let tv = tape.value(col);
        for i in 0..4 {
            assert!((plain[i] - tv[(i, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_then_invert_is_identity() {
        let net = MafNet::new(3, 1, 10, 4);
        let params = random_params(&net, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let theta = DMatrix::from_fn(50, 3, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            1.5 * v
        });
        let x = DMatrix::from_fn(50, 1, |_, _| StandardNormal.sample(&mut rng));
        let z = net.forward_std(&params, &theta, &x);
        let back = net.invert_std(&params, z, &x);
        assert!((back - theta).abs().max() < 1e-9);
    }

    #[test]
    fn autoregressive_masks_block_future_coordinates() {
        // Output j must not depend on input coordinates >= j (in transform
        // order). Perturb theta[2] and check z[0], z[1] of a single
        // transform stay fixed.
        let net = MafNet::new(3, 1, 9, 1);
        let params = random_params(&net, 5);
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        let a = DMatrix::from_row_slice(1, 3, &[0.5, -0.2, 0.9]);
        let b = DMatrix::from_row_slice(1, 3, &[0.5, -0.2, -4.0]);
        let za = net.forward_std(&params, &a, &x);
        let zb = net.forward_std(&params, &b, &x);
        assert!((za[(0, 0)] - zb[(0, 0)]).abs() < 1e-14);
        assert!((za[(0, 1)] - zb[(0, 1)]).abs() < 1e-14);
        assert!((za[(0, 2)] - zb[(0, 2)]).abs() > 1e-6);
    }

    #[test]
    fn one_dimensional_flow_depends_on_context_only_through_heads() {
        // d=1: the shift and scale are functions of x alone, so the flow is
        // an affine map of theta per context and still normalizes.
        let net = MafNet::new(1, 1, 6, 2);
        let params = random_params(&net, 9);
        let x = DMatrix::from_row_slice(1, 1, &[1.2]);
        let t1 = DMatrix::from_row_slice(1, 1, &[0.0]);
        let t2 = DMatrix::from_row_slice(1, 1, &[1.0]);
        let z1 = net.forward_std(&params, &t1, &x);
        let z2 = net.forward_std(&params, &t2, &x);
        let t15 = DMatrix::from_row_slice(1, 1, &[0.5]);
        let z15 = net.forward_std(&params, &t15, &x);
        // Affine in theta: midpoint maps to midpoint.
        assert!((z15[(0, 0)] - 0.5 * (z1[(0, 0)] + z2[(0, 0)])).abs() < 1e-10);
    }
}
