use ahsnpe::flow::{fit_snpe_atomic, EstimatorSpec, TrainConfig};
use ahsnpe::gauss::Mvn;
use ahsnpe::mixture::{sample_component, ProposalMixture, RoundTag};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    for (n_pairs, epochs, atoms, lr) in [(4000usize, 150usize, 10usize, 3e-3), (10000, 300, 10, 1e-3), (10000, 300, 20, 1e-3)] {
        let mut rng = StdRng::seed_from_u64(1);
        let prop_mean = DVector::from_element(1, 2.0);
        let prop_cov = DMatrix::from_element(1, 1, 0.25);
        let thetas = sample_component(&prop_mean, &prop_cov, n_pairs, &mut rng).unwrap();
        let proposal = ProposalMixture::empty()
            .add_component(prop_mean.clone(), prop_cov.clone(), n_pairs, RoundTag::Initial)
            .unwrap();
        let data: Vec<(DVector<f64>, DVector<f64>)> = thetas
            .into_iter()
            .map(|t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (t.clone(), DVector::from_element(1, t[0] + e))
            })
            .collect();
        let prior = Mvn::new(DVector::zeros(1), &DMatrix::from_element(1, 1, 9.0)).unwrap();
        let cfg = TrainConfig { max_epochs: epochs, learning_rate: lr, batch_size: 256, n_atoms: atoms, patience: 40, ..TrainConfig::new(3) };
        let t0 = std::time::Instant::now();
        let (est, rep) = fit_snpe_atomic(&EstimatorSpec::mdn(4, 16, 1, 1), &data, &prior, &proposal, &cfg).unwrap();
        println!("pairs {n_pairs} epochs_run {} best {} atoms {atoms} lr {lr}  [{:.1}s]", rep.train_loss.len(), rep.best_epoch, t0.elapsed().as_secs_f64());
        for x in [1.5f64, 2.0, 2.5] {
            let mut r2 = StdRng::seed_from_u64(9);
            let draws = est.sample(&DVector::from_element(1, x), 4000, &mut r2).unwrap();
            let mean = draws.column(0).sum() / draws.nrows() as f64;
            println!("  x = {x:+.1}: snpe {mean:+.3}  analytic {:+.3}  uncorrected {:+.3}", 0.9 * x, 0.2 * x + 1.6);
        }
    }
}
