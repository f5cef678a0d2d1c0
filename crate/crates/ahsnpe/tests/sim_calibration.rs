//! Sampler calibration. For the dyad-independent edges-only model the edge
//! count is exactly Binomial(M, sigmoid(theta)), which pins the whole
//! stationary distribution; the tie/no-tie and uniform-dyad kernels must
//! agree with each other; and a positive GWESP coefficient must push the
//! GWESP statistic up.

mod common;

use ahsnpe::sim::{simulate_stats_batch, ErgmModel, ErgmParams, Proposal, SimConfig};
use common::{ks_two_sample, mean_and_se, sigmoid};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

fn edge_draws(theta1: f64, n_nodes: usize, draws: usize, proposal: Proposal, seed: u64) -> Vec<f64> {
    let model = ErgmModel::edges_only(n_nodes);
    let params = vec![ErgmParams::from_slice(&[theta1]).unwrap(); draws];
    let cfg = SimConfig { proposal, ..SimConfig::defaults(n_nodes, seed) };
    simulate_stats_batch(&model, &params, &cfg)
        .iter()
        .map(|s| s.edges as f64)
        .collect()
}

#[test]
fn edge_counts_follow_the_exact_binomial_law() {
    // Chi-square goodness of fit with tail bins pooled to expected >= 5,
    // compared against the 99.9% quantile; a kernel or Hastings bug shifts
    // the statistic by orders of magnitude.
    let (n_nodes, theta1, draws) = (8usize, -1.0, 1500usize);
    let m = n_nodes * (n_nodes - 1) / 2;
    let p = sigmoid(theta1);
    let counts = edge_draws(theta1, n_nodes, draws, Proposal::TieNoTie, 11);

    let binom = Binomial::new(p, m as u64).unwrap();
    let mut observed = vec![0.0f64; m + 1];
    for c in &counts {
        observed[c.round() as usize] += 1.0;
    }
    let expected: Vec<f64> = (0..=m).map(|k| binom.pmf(k as u64) * draws as f64).collect();

    // Pool left-to-right into bins of expected mass >= 5.
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut eo, mut ee) = (0.0, 0.0);
    for k in 0..=m {
        eo += observed[k];
        ee += expected[k];
        if ee >= 5.0 {
            bins.push((eo, ee));
            eo = 0.0;
            ee = 0.0;
        }
    }
    if ee > 0.0 {
        let last = bins.last_mut().expect("at least one bin");
        last.0 += eo;
        last.1 += ee;
    }
    let chi2: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = (bins.len() - 1) as f64;
    let cutoff = ChiSquared::new(dof).unwrap().inverse_cdf(0.999);
    assert!(chi2 < cutoff, "chi-square {chi2:.1} over {dof} dof exceeds {cutoff:.1}");
}

#[test]
fn density_tracks_the_sigmoid_at_each_parameter() {
    let n_nodes = 15;
    let m = (n_nodes * (n_nodes - 1) / 2) as f64;
    for (i, theta1) in [-2.0, -1.0, 0.0].into_iter().enumerate() {
        let densities: Vec<f64> = edge_draws(theta1, n_nodes, 400, Proposal::TieNoTie, 20 + i as u64)
            .into_iter()
            .map(|e| e / m)
            .collect();
        let (mean, se) = mean_and_se(&densities);
        let target = sigmoid(theta1);
        assert!(
            (mean - target).abs() < 3.0 * se.max(1e-6),
            "theta1 = {theta1}: density {mean:.4} vs sigmoid {target:.4}, se {se:.5}"
        );
    }
}

#[test]
fn proposal_kernels_agree_in_distribution() {
    // Same stationary law from both kernels; a missing Hastings correction
    // in the tie/no-tie route would separate the samples.
    let draws = 600;
    let tnt = edge_draws(-1.5, 9, draws, Proposal::TieNoTie, 31);
    let uni = edge_draws(-1.5, 9, draws, Proposal::UniformDyad, 32);
    let ks = ks_two_sample(&tnt, &uni);
    assert!(ks < 0.1, "KS distance {ks} between proposal kernels");
    let (m_tnt, se_tnt) = mean_and_se(&tnt);
    let (m_uni, se_uni) = mean_and_se(&uni);
    let se = (se_tnt.powi(2) + se_uni.powi(2)).sqrt();
    assert!((m_tnt - m_uni).abs() < 4.0 * se, "means {m_tnt:.3} vs {m_uni:.3}");
}

#[test]
fn positive_gwesp_coefficient_raises_the_statistic() {
    let n_nodes = 10;
    let draws = 300;
    let cfg = SimConfig::defaults(n_nodes, 41);
    let model = ErgmModel::standard(n_nodes);
    let sample = |theta: [f64; 3], seed: u64| -> Vec<f64> {
        let params = vec![ErgmParams::from_slice(&theta).unwrap(); draws];
        let cfg = SimConfig { seed, ..cfg.clone() };
        simulate_stats_batch(&model, &params, &cfg)
            .iter()
            .map(|s| s.gwesp)
            .collect()
    };
    let with = sample([-1.0, 0.8, 0.0], 51);
    let without = sample([-1.0, 0.0, 0.0], 52);
    let (m_with, se_with) = mean_and_se(&with);
    let (m_without, se_without) = mean_and_se(&without);
    let se = (se_with.powi(2) + se_without.powi(2)).sqrt();
    assert!(
        m_with - m_without > 4.0 * se,
        "gwesp {m_with:.2} at 0.8 vs {m_without:.2} at 0 (se {se:.3})"
    );
}
