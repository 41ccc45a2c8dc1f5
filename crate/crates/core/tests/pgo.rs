use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sio_core::geom::{exp_so3, Pose, Rotation};
use sio_core::imu::{Matrix9, NavState, PreintDelta};
use sio_core::pgo::{self, CostKind, IcpEdge, ImuEdge, InfoWeights, PoseGraph, SolverConfig};

const G: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-s..=s))
}

/// A chain whose edges disagree with each other by `noise`, initialized near
/// the states the edges were drawn from.
fn noisy_graph(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> PoseGraph {
    let dt = 0.2;
    let mut truth = vec![NavState::new(exp_so3(&rand_vec(rng, 2.0)), rand_vec(rng, 1.0), rand_vec(rng, 3.0), 0.0)];
    for k in 1..n {
        let prev = truth[k - 1];
        truth.push(NavState::new(
            prev.rotation * exp_so3(&rand_vec(rng, 0.2)),
            prev.velocity + rand_vec(rng, 0.3),
            prev.position + prev.velocity * dt + rand_vec(rng, 0.1),
            prev.t + dt,
        ));
    }
    let mut icp_edges = Vec::new();
    let mut imu_edges = Vec::new();
    for i in 0..n - 1 {
        let (a, b) = (truth[i], truth[i + 1]);
        let rel = a.pose().inverse().compose(&b.pose());
        icp_edges.push(IcpEdge {
            i,
            dt: Pose::new(rel.rotation * exp_so3(&rand_vec(rng, noise)), rel.translation + rand_vec(rng, noise)),
            overlap: rng.random_range(0.3..1.0),
        });
        let (dr, dv, dp) = pgo::implied_delta(&a, &b, &G, dt);
        let l = Matrix9::from_fn(|r, c| if r == c { 0.1 } else if r > c { rng.random_range(-0.02..0.02) } else { 0.0 });
        imu_edges.push(ImuEdge {
            i,
            dt,
            delta: PreintDelta {
                dr: dr * exp_so3(&rand_vec(rng, noise)),
                dv: dv + rand_vec(rng, noise),
                dp: dp + rand_vec(rng, noise),
                cov: l * l.transpose(),
                dt,
            },
        });
    }
    let mut nodes = truth;
    for s in nodes.iter_mut().skip(1) {
        s.rotation = s.rotation * exp_so3(&rand_vec(rng, 0.03));
        s.velocity += rand_vec(rng, 0.05);
        s.position += rand_vec(rng, 0.05);
    }
    PoseGraph {
        nodes,
        icp_edges,
        imu_edges,
        gravity: G,
    }
}

/// Applies the world-frame transform `(r, t)` to every state and to gravity.
fn transform_world(graph: &PoseGraph, r: &Rotation, t: &Vector3<f64>) -> PoseGraph {
    let mut g = graph.clone();
    for s in &mut g.nodes {
        s.rotation = (*r * s.rotation).renormalized();
        s.velocity = r.rotate(&s.velocity);
        s.position = r.rotate(&s.position) + t;
    }
    g.gravity = r.rotate(&graph.gravity);
    g
}

fn tight() -> SolverConfig {
    SolverConfig {
        max_iterations: 200,
        cost_tol: 1e-15,
        step_tol: 1e-13,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn final_cost_is_gauge_invariant(seed in any::<u64>(), inference in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = noisy_graph(&mut rng, 10, 0.02);
        let kind = if inference { CostKind::Inference } else { CostKind::Training };
        let r = Rotation::new(*Rotation3::from_scaled_axis(rand_vec(&mut rng, 2.0)).matrix()).unwrap();
        let moved = transform_world(&graph, &r, &rand_vec(&mut rng, 50.0));
        let w = InfoWeights::default();
        let (_, a) = pgo::solve_lm(&graph, &w, kind, &tight()).unwrap();
        let (_, b) = pgo::solve_lm(&moved, &w, kind, &tight()).unwrap();
        prop_assert!((a.final_cost - b.final_cost).abs() <= 1e-9, "{} vs {}", a.final_cost, b.final_cost);
    }

    #[test]
    fn accepted_steps_never_increase_cost(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = noisy_graph(&mut rng, 8, 0.05);
        for kind in [CostKind::Training, CostKind::Inference] {
            let (_, report) = pgo::solve_lm(&graph, &InfoWeights::default(), kind, &SolverConfig::default()).unwrap();
            prop_assert!(report.cost_history.windows(2).all(|w| w[1] < w[0]));
            prop_assert!(report.final_cost <= report.initial_cost);
        }
    }

    #[test]
    fn jacobian_converges_quadratically_in_step(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = noisy_graph(&mut rng, 5, 0.05);
        let w = InfoWeights::default();
        let j = |h: f64| pgo::numerical_jacobian(&graph, &w, CostKind::Training, h).unwrap();
        let (j1, j2, j4) = (j(2e-2), j(1e-2), j(5e-3));
        let ratio = (&j1 - &j2).norm() / (&j2 - &j4).norm();
        prop_assert!((3.5..=4.5).contains(&ratio), "ratio {}", ratio);
        prop_assert!((&j2 - &j4).norm() <= 1e-3 * j4.norm());
    }

    #[test]
    fn uniform_weight_scaling_keeps_argmin(seed in any::<u64>(), scale in 0.01..100.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = noisy_graph(&mut rng, 8, 0.02);
        let w = InfoWeights { w1: 3.0, w2: 1.0, w3: 0.5, w4: 2.0, ..Default::default() };
        let scaled = InfoWeights { w1: w.w1 * scale, w2: w.w2 * scale, w3: w.w3 * scale, w4: w.w4 * scale, ..w };
        let (a, _) = pgo::solve_lm(&graph, &w, CostKind::Training, &tight()).unwrap();
        let (b, _) = pgo::solve_lm(&graph, &scaled, CostKind::Training, &tight()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.rotation.angle_to(&y.rotation) <= 1e-6);
            prop_assert!((x.velocity - y.velocity).amax() <= 1e-6);
            prop_assert!((x.position - y.position).amax() <= 1e-6);
        }
    }
}
