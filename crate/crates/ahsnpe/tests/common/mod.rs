//! Shared helpers for the integration suites: independent statistic oracles
//! computed straight off the dense adjacency matrix, random graph fixtures,
//! and distribution-distance measures.

#![allow(dead_code)] // each test target uses its own subset

use ahsnpe::graph::Graph;
use rand::Rng;

/// Brute-force (edges, gwesp, gwnsp): for every dyad, count shared partners
/// by scanning all third nodes in the dense adjacency matrix. No caches, no
/// incremental structure; deliberately slow and obviously correct.
pub fn oracle_stats(g: &Graph, tau: f64) -> (f64, f64, f64) {
    let a = g.to_dense();
    let n = a.len();
    let mut edges = 0.0;
    let mut gwesp = 0.0;
    let mut gwnsp = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut shared = 0u32;
            for k in 0..n {
                if k != i && k != j && a[i][k] == 1 && a[j][k] == 1 {
                    shared += 1;
                }
            }
            let weight = if shared == 0 {
                0.0
            } else {
                tau.exp() * (1.0 - (1.0 - (-tau).exp()).powi(shared as i32))
            };
            if a[i][j] == 1 {
                edges += 1.0;
                gwesp += weight;
            } else {
                gwnsp += weight;
            }
        }
    }
    (edges, gwesp, gwnsp)
}

/// Bernoulli(p) graph on n nodes.
pub fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges).expect("valid dyads")
}

/// Relabels nodes by `perm` (perm[old] = new).
pub fn permute_graph(g: &Graph, perm: &[usize]) -> Graph {
    let edges: Vec<(usize, usize)> =
        g.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect();
    Graph::from_edges(g.n_nodes(), &edges).expect("permutation preserves validity")
}

/// Two-sample Kolmogorov-Smirnov statistic. The ECDF difference is
/// evaluated only at distinct data values, with both pointers advanced past
/// the whole tied block first, so heavily tied (discrete) samples are
/// handled correctly.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!("loop condition"),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// One-sample Kolmogorov-Smirnov statistic against a CDF.
pub fn ks_against_cdf(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - c).abs());
    }
    d
}

/// Exact 1-d posterior on a fine grid for the dyad-independent edges-only
/// model: each dyad is an independent Bernoulli(sigmoid(theta)), so
/// log p(y | theta) = e * theta - M * ln(1 + exp(theta)) up to a constant,
/// combined with a Normal(prior_mean, prior_sd^2) prior. Everything is
/// computed directly from these formulas.
pub struct GridPosterior {
    thetas: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
}

impl GridPosterior {
    pub fn edges_only(
        n_edges: usize,
        n_dyads: usize,
        prior_mean: f64,
        prior_sd: f64,
        lo: f64,
        hi: f64,
        step: f64,
    ) -> Self {
        let n = ((hi - lo) / step).round() as usize + 1;
        let thetas: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let log_w: Vec<f64> = thetas
            .iter()
            .map(|&t| {
                let log_lik = n_edges as f64 * t - n_dyads as f64 * (1.0 + t.exp()).ln();
                let z = (t - prior_mean) / prior_sd;
                log_lik - 0.5 * z * z
            })
            .collect();
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mean = thetas.iter().zip(&w).map(|(t, p)| t * p).sum::<f64>() / total;
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for p in &w {
            acc += p / total;
            cdf.push(acc);
        }
        GridPosterior { thetas, cdf, mean }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Step-function CDF; exact enough at a 1e-3 grid for KS comparisons at
    /// the tolerances used here.
    pub fn cdf(&self, x: f64) -> f64 {
        match self.thetas.binary_search_by(|t| t.partial_cmp(&x).unwrap()) {
            Ok(i) => self.cdf[i],
            Err(0) => 0.0,
            Err(i) => self.cdf[i - 1],
        }
    }
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
