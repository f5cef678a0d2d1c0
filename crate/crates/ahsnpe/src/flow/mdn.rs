//! Mixture density network: a tanh hidden layer on the context feeding
//! mixture logits and, per component, a mean and a full precision Cholesky
//! factor (softplus-plus-floor diagonal, free strict lower triangle).
//!
//! With A the lower-triangular factor, z = A (theta - mu) and the component
//! log-density is -d/2 ln 2pi + sum(ln diag A) - z'z / 2; the mixture is
//! combined through a log-softmax over the logits.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::flow::tape::{softplus, NodeId, Tape};
use crate::gauss::{log_sum_exp, sample_std_normal_vec, LN_2PI};

const DIAG_FLOOR: f64 = 1e-6;

/// Leading shared parameters before the per-component blocks.
pub(crate) const MDN_SHARED_PARAMS: usize = 4;
/// Parameters per mixture component.
pub(crate) const MDN_PARAMS_PER_COMPONENT: usize = 6;

pub(crate) struct MdnNet {
    d: usize,
    m: usize,
    h: usize,
    c: usize,
    /// Strict lower-triangle size d(d-1)/2.
    q: usize,
}

/// Row-major strict-lower-triangle index for entry (j, k), k < j.
fn tri_index(j: usize, k: usize) -> usize {
    j * (j - 1) / 2 + k
}

impl MdnNet {
    pub fn new(theta_dim: usize, context_dim: usize, hidden_units: usize, n_components: usize) -> Self {
        MdnNet {
            d: theta_dim,
            m: context_dim,
            h: hidden_units,
            c: n_components,
            q: theta_dim * (theta_dim - 1) / 2,
        }
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![
            (self.m, self.h), // v1 (context -> hidden)
            (1, self.h),      // b1
            (self.h, self.c), // w_logit
            (1, self.c),      // b_logit
        ];
        for _ in 0..self.c {
            shapes.push((self.h, self.d)); // w_mu
            shapes.push((1, self.d)); // b_mu
            shapes.push((self.h, self.d)); // w_diag
            shapes.push((1, self.d)); // b_diag
            shapes.push((self.h, self.q)); // w_off
            shapes.push((1, self.q)); // b_off
        }
        shapes
    }

    /// Indices of bias rows in `param_shapes` order. Weight matrices can
    /// also have a single row when an input dimension is 1, so callers must
    /// not infer bias-ness from shape.
    pub fn bias_params(&self) -> Vec<usize> {
        let mut idx = vec![1, 3];
        for c in 0..self.c {
            let base = MDN_SHARED_PARAMS + c * MDN_PARAMS_PER_COMPONENT;
            idx.extend([base + 1, base + 3, base + 5]);
        }
        idx
    }

    /// Indices of head parameters zeroed at initialization, and the diagonal
    /// biases that instead start at softplus^-1(1 - floor) so every
    /// component opens as a standard normal.
    pub fn identity_start_params(&self) -> (Vec<usize>, Vec<usize>) {
        let mut zeroed = vec![2, 3];
        let mut diag_biases = Vec::new();
        for c in 0..self.c {
            let base = MDN_SHARED_PARAMS + c * MDN_PARAMS_PER_COMPONENT;
            zeroed.extend([base, base + 1, base + 2, base + 4, base + 5]);
            diag_biases.push(base + 3);
        }
        (zeroed, diag_biases)
    }

    /// Bias value making softplus(b) + floor == 1.
    pub fn unit_diag_bias() -> f64 {
        // softplus^-1(y) = ln(e^y - 1)
        (1.0 - DIAG_FLOOR).exp_m1().ln()
    }

    fn hidden_plain(&self, p: &[DMatrix<f64>], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = x * &p[0];
        crate::flow::maf::add_row_in_place(&mut pre, &p[1]);
        pre.map(f64::tanh)
    }

    /// log q(theta | x) per row, standardized space, plain evaluation.
    pub fn log_prob_plain(
        &self,
        params: &[DMatrix<f64>],
        theta: &DMatrix<f64>,
        x: &DMatrix<f64>,
    ) -> DVector<f64> {
        let b = theta.nrows();
        let hid = self.hidden_plain(params, x);
        let mut logits = &hid * &params[2];
        crate::flow::maf::add_row_in_place(&mut logits, &params[3]);
        let mut out = DVector::zeros(b);
        let mut comp = vec![0.0; self.c];
        for i in 0..b {
            let row_lse = log_sum_exp(logits.row(i).iter().copied().collect::<Vec<_>>().as_slice());
            for c in 0..self.c {
                let p = &params[MDN_SHARED_PARAMS + c * MDN_PARAMS_PER_COMPONENT..];
                let log_w = logits[(i, c)] - row_lse;
                let mut lc = -0.5 * self.d as f64 * LN_2PI;
                // z = A (theta - mu) built row by row of the Cholesky factor.
                let mut diff = vec![0.0; self.d];
                for j in 0..self.d {
                    let mu = hid.row(i).dot(&p[0].column(j).transpose()) + p[1][(0, j)];
                    diff[j] = theta[(i, j)] - mu;
                }
                for j in 0..self.d {
                    let raw = hid.row(i).dot(&p[2].column(j).transpose()) + p[3][(0, j)];
                    let a_jj = softplus(raw) + DIAG_FLOOR;
                    lc += a_jj.ln();
                    let mut z = a_jj * diff[j];
                    for k in 0..j {
                        let a_jk =
                            hid.row(i).dot(&p[4].column(tri_index(j, k)).transpose()) + p[5][(0, tri_index(j, k))];
                        z += a_jk * diff[k];
                    }
                    lc -= 0.5 * z * z;
                }
                comp[c] = log_w + lc;
            }
            out[i] = log_sum_exp(&comp);
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
        let a1 = tape.matmul(x, params[0]);
        let pre = tape.add_row(a1, params[1]);
        let hid = tape.tanh(pre);
        let l0 = tape.matmul(hid, params[2]);
        let logits = tape.add_row(l0, params[3]);
        let lse = tape.row_logsumexp(logits);
        let log_w = tape.sub_col(logits, lse);

        let mut comp_cols = Vec::with_capacity(self.c);
        for c in 0..self.c {
            let p = &params[MDN_SHARED_PARAMS + c * MDN_PARAMS_PER_COMPONENT
                ..MDN_SHARED_PARAMS + (c + 1) * MDN_PARAMS_PER_COMPONENT];
            let mu0 = tape.matmul(hid, p[0]);
            let mu = tape.add_row(mu0, p[1]);
            let diff = tape.sub(theta, mu); // B x d
            let dr0 = tape.matmul(hid, p[2]);
            let dr = tape.add_row(dr0, p[3]);
            let sp = tape.softplus(dr);
            let diag = tape.add_scalar(sp, DIAG_FLOOR); // B x d
            let off = if self.q > 0 {
                let o0 = tape.matmul(hid, p[4]);
                Some(tape.add_row(o0, p[5])) // B x q
            } else {
                None
            };

            // Accumulate -0.5 z'z and sum ln diag across coordinates.
            let mut lc: Option<NodeId> = None;
            for j in 0..self.d {
                let a_jj = tape.slice_col(diag, j);
                let d_j = tape.slice_col(diff, j);
                let mut z = tape.mul(a_jj, d_j);
                for k in 0..j {
                    let off_id = off.expect("d > 1 implies off-diagonal block");
                    let a_jk = tape.slice_col(off_id, tri_index(j, k));
                    let d_k = tape.slice_col(diff, k);
                    let term = tape.mul(a_jk, d_k);
                    z = tape.add(z, term);
                }
                let z2 = tape.square(z);
                let z2h = tape.scale(z2, -0.5);
                let ln_a = tape.ln(a_jj);
                let term = tape.add(z2h, ln_a);
                lc = Some(match lc {
                    None => term,
                    Some(acc) => tape.add(acc, term),
                });
            }
            let lc = lc.expect("theta_dim >= 1");
            let lc = tape.add_scalar(lc, -0.5 * self.d as f64 * LN_2PI);
            comp_cols.push(lc);
        }
        let comp = tape.concat_cols(&comp_cols); // B x C
        let joint = tape.add(log_w, comp);
        tape.row_logsumexp(joint)
    }

    /// n draws from q(. | x) in standardized space: pick a component from the
    /// softmax weights, draw base noise, and solve A u = eps by forward
    /// substitution.
    pub fn sample_std(
        &self,
        params: &[DMatrix<f64>],
        x_row: &DVector<f64>,
        n: usize,
        rng: &mut impl Rng,
    ) -> DMatrix<f64> {
        let x = DMatrix::from_fn(1, self.m, |_, j| x_row[j]);
        let hid = self.hidden_plain(params, &x);
        let mut logits = &hid * &params[2];
        crate::flow::maf::add_row_in_place(&mut logits, &params[3]);
        let logit_v: Vec<f64> = logits.row(0).iter().copied().collect();
        let lse = log_sum_exp(&logit_v);
        let weights: Vec<f64> = logit_v.iter().map(|l| (l - lse).exp()).collect();

        // Per-component mean and Cholesky factor at this context.
        let mut mus = Vec::with_capacity(self.c);
        let mut chols = Vec::with_capacity(self.c);
        for c in 0..self.c {
            let p = &params[MDN_SHARED_PARAMS + c * MDN_PARAMS_PER_COMPONENT..];
            let mut mu = DVector::zeros(self.d);
            let mut a = DMatrix::zeros(self.d, self.d);
            for j in 0..self.d {
                mu[j] = hid.row(0).dot(&p[0].column(j).transpose()) + p[1][(0, j)];
                let raw = hid.row(0).dot(&p[2].column(j).transpose()) + p[3][(0, j)];
                a[(j, j)] = softplus(raw) + DIAG_FLOOR;
                for k in 0..j {
                    a[(j, k)] =
                        hid.row(0).dot(&p[4].column(tri_index(j, k)).transpose()) + p[5][(0, tri_index(j, k))];
                }
            }
            mus.push(mu);
            chols.push(a);
        }

        let mut out = DMatrix::zeros(n, self.d);
        for i in 0..n {
            let roll: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.c - 1;
            for (c, w) in weights.iter().enumerate() {
                acc += w;
                if roll < acc {
                    pick = c;
                    break;
                }
            }
            let eps = sample_std_normal_vec(self.d, rng);
            // Forward substitution: A u = eps.
            let a = &chols[pick];
            let mut u = DVector::zeros(self.d);
            for j in 0..self.d {
                let mut rhs = eps[j];
                for k in 0..j {
                    rhs -= a[(j, k)] * u[k];
                }
                u[j] = rhs / a[(j, j)];
            }
            for j in 0..self.d {
                out[(i, j)] = mus[pick][j] + u[j];
            }
        }
        out
    }
}
