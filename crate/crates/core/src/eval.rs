//! Absolute and relative trajectory errors, and TUM trajectory files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::geom::Rotation;
use crate::imu::NavState;
use crate::{Error, Result};

/// Maximum timestamp difference for two states to be associated, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 1e-3;

/// Timestamped states with strictly increasing times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    states: Vec<NavState>,
}

impl Trajectory {
    pub fn new(states: Vec<NavState>) -> Result<Self> {
        if let Some(k) = states.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(Error::invalid(format!("timestamps not strictly increasing at index {}", k + 1)));
        }
        if states.iter().any(|s| !s.t.is_finite()) {
            return Err(Error::invalid("non-finite timestamp"));
        }
        Ok(Trajectory { states })
    }

    pub fn states(&self) -> &[NavState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State nearest to `t` if within [`ASSOCIATION_TOLERANCE`].
    pub fn at(&self, t: f64) -> Option<&NavState> {
        let k = self.states.partition_point(|s| s.t < t);
        let candidates = [k.checked_sub(1), Some(k)];
        candidates
            .into_iter()
            .flatten()
            .filter_map(|i| self.states.get(i))
            .filter(|s| (s.t - t).abs() <= ASSOCIATION_TOLERANCE)
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }
}

/// Index pairs `(est, gt)` whose timestamps agree within the tolerance.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, s) in est.states.iter().enumerate() {
        let k = gt.states.partition_point(|g| g.t < s.t);
        let best = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt.len() && (gt.states[j].t - s.t).abs() <= ASSOCIATION_TOLERANCE)
            .min_by(|&a, &b| (gt.states[a].t - s.t).abs().total_cmp(&(gt.states[b].t - s.t).abs()));
        if let Some(j) = best {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Mean Euclidean position error over associated states, without alignment.
pub fn ape(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let pairs = associate(est, gt);
    if pairs.is_empty() {
        return Err(Error::invalid("no associated states between trajectories"));
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| (est.states[i].position - gt.states[j].position).norm())
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// Estimator states at the two ends of one interval, with the estimator
/// started from the ground-truth state at `start.t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalEstimate {
    pub start: NavState,
    pub end: NavState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpeResult {
    pub rpe: f64,
    pub count: usize,
    /// Intervals lacking a ground-truth endpoint or of the wrong length.
    pub skipped: usize,
}

/// Mean over intervals of `‖(p_{t+Δt} − p_t) − R_t·R̂_tᵀ·(p̂_{t+Δt} − p̂_t)‖`.
pub fn rpe_fixed_interval(est: &[IntervalEstimate], gt: &Trajectory, interval: f64) -> Result<RpeResult> {
    if !(interval.is_finite() && interval > 0.0) {
        return Err(Error::invalid("RPE interval must be positive"));
    }
    let mut sum = 0.0;
    let mut count = 0;
    let mut skipped = 0;
    for e in est {
        let length_ok = ((e.end.t - e.start.t) - interval).abs() <= ASSOCIATION_TOLERANCE;
        let (Some(g0), Some(g1)) = (gt.at(e.start.t), gt.at(e.end.t)) else {
            skipped += 1;
            continue;
        };
        if !length_ok {
            skipped += 1;
            continue;
        }
        let d_gt = g1.position - g0.position;
        let d_est = e.end.position - e.start.position;
        let align = g0.rotation * e.start.rotation.inverse();
        sum += (d_gt - align.rotate(&d_est)).norm();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid(format!("no complete RPE intervals ({skipped} skipped)")));
    }
    Ok(RpeResult {
        rpe: sum / count as f64,
        count,
        skipped,
    })
}

/// Consecutive state pairs of `traj` that are `interval` apart.
pub fn intervals_from_trajectory(traj: &Trajectory, interval: f64) -> Vec<IntervalEstimate> {
    let mut out = Vec::new();
    for (i, s) in traj.states.iter().enumerate() {
        let target = s.t + interval;
        let k = i + traj.states[i..].partition_point(|x| x.t < target - ASSOCIATION_TOLERANCE);
        if let Some(e) = traj.states.get(k) {
            if (e.t - target).abs() <= ASSOCIATION_TOLERANCE {
                out.push(IntervalEstimate { start: *s, end: *e });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub ape: f64,
    pub rpe: f64,
    pub interval: f64,
    pub count: usize,
}

/// `t x y z qx qy qz qw` per line.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(traj.len() * 120);
    for s in &traj.states {
        let q = s.rotation.to_quaternion();
        let p = s.position;
        let _ = writeln!(
            out,
            "{:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            s.t, p.x, p.y, p.z, q[0], q[1], q[2], q[3]
        );
    }
    out
}

/// Parses TUM text; velocities are zero. Blank lines and `#` comments are skipped.
pub fn parse_tum(text: &str, source: &str) -> Result<Trajectory> {
    let mut states = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(source, i + 1, format!("bad number `{t}`")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(Error::parse(source, i + 1, format!("expected 8 values, found {}", vals.len())));
        }
        let rotation = Rotation::from_quaternion([vals[4], vals[5], vals[6], vals[7]])
            .map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        states.push(NavState::new(
            rotation,
            Vector3::zeros(),
            Vector3::new(vals[1], vals[2], vals[3]),
            vals[0],
        ));
    }
    Trajectory::new(states).map_err(|e| Error::parse(source, 0, e.to_string()))
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    std::fs::write(path, format_tum(traj))?;
    Ok(())
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)?;
    parse_tum(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::exp_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|k| {
                    NavState::new(
                        exp_so3(&Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0))),
                        Vector3::zeros(),
                        Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0)),
                        0.2 * k as f64,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ape_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_traj(&mut rng, 20);
        assert_eq!(ape(&gt, &gt).unwrap(), 0.0);
        let shifted = Trajectory::new(
            gt.states()
                .iter()
                .map(|s| NavState {
                    position: s.position + Vector3::new(3.0, 4.0, 0.0),
                    ..*s
                })
                .collect(),
        )
        .unwrap();
        assert_relative_eq!(ape(&shifted, &gt).unwrap(), 5.0, epsilon = 1e-12);
        let late = Trajectory::new(vec![NavState { t: 100.0, ..Default::default() }]).unwrap();
        assert!(ape(&late, &gt).is_err());
    }

    #[test]
    fn association_tolerance() {
        let gt = Trajectory::new(vec![
            NavState { t: 0.0, ..Default::default() },
            NavState { t: 1.0, ..Default::default() },
        ])
        .unwrap();
        assert_eq!(gt.at(0.0005).unwrap().t, 0.0);
        assert_eq!(gt.at(0.9995).unwrap().t, 1.0);
        assert!(gt.at(0.5).is_none());
        assert!(Trajectory::new(vec![NavState::default(), NavState::default()]).is_err());
    }

    #[test]
    fn rpe_scaled_straight_line() {
        let gt = Trajectory::new(
            (0..6)
                .map(|k| NavState {
                    position: Vector3::new(k as f64, 0.0, 0.0),
                    t: 0.2 * k as f64,
                    ..Default::default()
                })
                .collect(),
        )
        .unwrap();
        let perfect = intervals_from_trajectory(&gt, 0.2);
        assert_eq!(perfect.len(), 5);
        assert_eq!(rpe_fixed_interval(&perfect, &gt, 0.2).unwrap().rpe, 0.0);
        let doubled: Vec<IntervalEstimate> = perfect
            .iter()
            .map(|e| IntervalEstimate {
                start: e.start,
                end: NavState {
                    position: e.start.position + (e.end.position - e.start.position) * 2.0,
                    ..e.end
                },
            })
            .collect();
        let r = rpe_fixed_interval(&doubled, &gt, 0.2).unwrap();
        assert_relative_eq!(r.rpe, 1.0, epsilon = 1e-12);
        assert_eq!(r.count, 5);
        let mut missing = doubled.clone();
        missing[0].end.t = 7.0;
        missing[0].start.t = 6.8;
        assert_eq!(rpe_fixed_interval(&missing, &gt, 0.2).unwrap().skipped, 1);
    }

    #[test]
    fn tum_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_traj(&mut rng, 30);
        let back = parse_tum(&format_tum(&t), "mem").unwrap();
        for (a, b) in t.states().iter().zip(back.states()) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.position, b.position);
            assert!((a.rotation.matrix() - b.rotation.matrix()).amax() <= 1e-9);
        }
        let err = parse_tum("0 1 2 3 0 0 0 1\n0.2 1 x 3 0 0 0 1\n", "traj.tum").unwrap_err();
        assert!(err.to_string().contains("traj.tum:2"));
    }
}
