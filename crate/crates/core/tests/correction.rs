use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sio_core::correction::{self, LossBreakdown};
use sio_core::geom::exp_so3;
use sio_core::imu::NavState;

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-s..=s))
}

fn state(rng: &mut ChaCha8Rng) -> NavState {
    NavState::new(exp_so3(&rand_vec(rng, 1.5)), rand_vec(rng, 3.0), rand_vec(rng, 10.0), 0.0)
}

fn breakdown(rng: &mut ChaCha8Rng) -> LossBreakdown {
    let mut v = || rng.random_range(0.0..2.0);
    LossBreakdown::new((v(), v(), v()), (v() - 1.0, v() - 1.0, v() - 1.0), 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pose_losses_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (state(&mut rng), state(&mut rng));
        let (r1, v1, p1) = correction::pose_losses(&a, &b);
        let (r2, v2, p2) = correction::pose_losses(&b, &a);
        prop_assert_eq!(v1, v2);
        prop_assert_eq!(p1, p2);
        prop_assert!((r1 - r2).abs() <= 1e-12);
    }

    #[test]
    fn isotropic_nll_is_minimized_at_mean_square_error(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = rand_vec(&mut rng, 2.0);
        prop_assume!(e.norm() > 1e-3);
        let best = e.norm_squared() / 3.0;
        let nll = |s2: f64| correction::gaussian_nll(&e, &(Matrix3::identity() * s2), "test").unwrap();
        let at_best = nll(best);
        for f in [0.5, 0.9, 0.99, 0.999, 1.001, 1.01, 1.1, 2.0] {
            prop_assert!(nll(best * f) > at_best, "σ² = {} beats {}", best * f, best);
        }
    }

    #[test]
    fn batch_loss_is_linear_in_each_weight(seed in any::<u64>(), k in 0usize..8, a in 0.0..5.0f64, b in 0.0..5.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items: Vec<(LossBreakdown, f64)> = (0..8).map(|_| (breakdown(&mut rng), rng.random_range(0.0..3.0))).collect();
        let eps = 1e-3;
        let mut at = |w: f64| {
            items[k].1 = w;
            correction::batch_loss(&items, eps).unwrap()
        };
        let (la, lb, lmid) = (at(a), at(b), at(0.5 * (a + b)));
        prop_assert!((lmid - 0.5 * (la + lb)).abs() <= 1e-12 * (1.0 + la.abs() + lb.abs()));
    }
}
