use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sio_core::motion::{self, BalanceWeights, EmConfig};

fn blobs(rng: &mut ChaCha8Rng, sizes: &[usize], d: usize, spread: f64) -> Vec<Vec<f64>> {
    let mut data = Vec::new();
    for (g, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            data.push(
                (0..d)
                    .map(|j| if j == g % d { spread * g as f64 } else { 0.0 } + Distribution::<f64>::sample(&StandardNormal, &mut *rng))
                    .collect(),
            );
        }
    }
    data
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rarer_components_weigh_more(counts in prop::collection::vec(0.5..1000.0f64, 2..10), beta in 0.99..0.9999f64) {
        let w = BalanceWeights::from_counts(&counts, beta).unwrap();
        for a in 0..counts.len() {
            for b in 0..counts.len() {
                if counts[a] < counts[b] {
                    prop_assert!(w.normalized[a] > w.normalized[b]);
                }
            }
        }
        let mean = w.normalized.iter().sum::<f64>() / counts.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sample_weight_is_a_convex_combination(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = blobs(&mut rng, &[120, 60, 20], 2, 6.0);
        let fit = motion::fit_gmm(&data, &[3], seed, &EmConfig::default()).unwrap();
        let w = motion::balance_weights(&fit.model, &data, 0.999).unwrap();
        let lo = w.normalized.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for _ in 0..50 {
            let z = vec![rng.random_range(-10.0..20.0), rng.random_range(-10.0..20.0)];
            let s = motion::sample_weight(&fit.model, &w, &z);
            prop_assert!(s >= lo * (1.0 - 1e-12) && s <= hi * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gmm_selection_is_deterministic_given_seed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = blobs(&mut rng, &[80, 80, 40], 3, 8.0);
        let a = motion::fit_gmm(&data, &[1, 2, 3, 4], seed, &EmConfig::default()).unwrap();
        let b = motion::fit_gmm(&data, &[4, 3, 2, 1], seed, &EmConfig::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn em_log_likelihood_never_decreases(seed in any::<u64>(), g in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = blobs(&mut rng, &[50, 30, 20], 2, 3.0);
        let run = motion::fit_em(&data, g, &EmConfig::default(), &mut rng).unwrap();
        prop_assert!(run.history.windows(2).all(|w| w[1] >= w[0]), "{:?}", run.history);
        prop_assert_eq!(run.log_likelihood, *run.history.last().unwrap());
    }
}
