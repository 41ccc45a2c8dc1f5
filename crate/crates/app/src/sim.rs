//! Synthetic sequences with exact kinematics.
//!
//! Attitude is parameterized by ZYX Euler angles so that body rates follow in
//! closed form from the angle rates. Every recipe returns position, velocity,
//! acceleration, angles and angle rates analytically; nothing is differentiated
//! numerically.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use sio_core::eval::Trajectory;
use sio_core::geom::Rotation;
use sio_core::imu::{ImuSample, NavState};
use sio_core::registration::PointCloud;

use crate::bundle::{Meta, ScanRecord, SequenceBundle};
use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Lemniscate-like loop with heading along the velocity and gentle roll/pitch.
    FigureEight,
    /// Straight moves between random waypoints, turning in place at each corner.
    Polyline,
    /// Sums of random sinusoids on every position and attitude coordinate.
    RandomSmooth,
    /// Constant pose.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Sequence length, seconds.
    pub duration: f64,
    /// Scan rate, Hz.
    pub scan_rate: f64,
    /// IMU rate, Hz; at least ten times the scan rate.
    pub imu_rate: f64,
    pub recipe: Recipe,
    /// Horizontal half-span of the motion, meters.
    pub amplitude: f64,
    /// Loop period of the figure-eight, seconds.
    pub period: f64,
    /// Constant gyroscope bias, rad/s.
    pub gyro_bias: [f64; 3],
    /// Constant accelerometer bias, m/s².
    pub accel_bias: [f64; 3],
    /// Per-sample gyroscope noise standard deviation, rad/s.
    pub gyro_noise: f64,
    /// Per-sample accelerometer noise standard deviation, m/s².
    pub accel_noise: f64,
    /// Number of landmarks placed uniformly in the room.
    pub landmarks: usize,
    /// Room size along x, y, z, centered on the origin, meters.
    pub room_extent: [f64; 3],
    /// Nearest landmarks kept per scan.
    pub points_per_scan: usize,
    /// Maximum landmark range, meters.
    pub scan_range: f64,
    /// Per-coordinate point noise standard deviation, meters.
    pub point_noise: f64,
    pub gravity: [f64; 3],
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration: 120.0,
            scan_rate: 5.0,
            imu_rate: 200.0,
            recipe: Recipe::FigureEight,
            amplitude: 10.0,
            period: 40.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
            gyro_noise: 0.0,
            accel_noise: 0.0,
            landmarks: 20_000,
            room_extent: [40.0, 30.0, 10.0],
            points_per_scan: 1000,
            scan_range: 20.0,
            point_noise: 0.002,
            gravity: [0.0, 0.0, -9.81],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(AppError::Config(msg.to_string()));
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.scan_rate) && positive(self.imu_rate)) {
            return bad("rates must be positive");
        }
        if self.imu_rate < 10.0 * self.scan_rate {
            return bad("imu_rate must be at least 10 x scan_rate");
        }
        if !positive(self.duration) || self.duration * self.scan_rate < 1.0 {
            return bad("duration must cover at least one scan interval");
        }
        if !(positive(self.amplitude) && positive(self.period) && positive(self.scan_range)) {
            return bad("amplitude, period and scan_range must be positive");
        }
        if !self.room_extent.iter().all(|&e| positive(e)) {
            return bad("room_extent must be positive");
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(nonneg(self.gyro_noise) && nonneg(self.accel_noise) && nonneg(self.point_noise)) {
            return bad("noise levels must be nonnegative");
        }
        if !self
            .gyro_bias
            .iter()
            .chain(&self.accel_bias)
            .chain(&self.gravity)
            .all(|v| v.is_finite())
        {
            return bad("biases and gravity must be finite");
        }
        if self.points_per_scan < 10 || self.landmarks < self.points_per_scan {
            return bad("need points_per_scan >= 10 and landmarks >= points_per_scan");
        }
        Ok(())
    }
}

/// Exact kinematic state at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Yaw, pitch, roll.
    pub angles: [f64; 3],
    pub angle_rates: [f64; 3],
}

impl Kinematics {
    fn still(position: Vector3<f64>, yaw: f64) -> Self {
        Kinematics {
            position,
            velocity: Vector3::zeros(),
            acceleration: Vector3::zeros(),
            angles: [yaw, 0.0, 0.0],
            angle_rates: [0.0; 3],
        }
    }

    /// `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn rotation(&self) -> Rotation {
        let [yaw, pitch, roll] = self.angles;
        Rotation::from_matrix_unchecked(*Rotation3::from_euler_angles(roll, pitch, yaw).matrix())
    }

    /// Body-frame angular velocity.
    pub fn body_rate(&self) -> Vector3<f64> {
        let [_, pitch, roll] = self.angles;
        let [dyaw, dpitch, droll] = self.angle_rates;
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        Vector3::new(
            droll - dyaw * sp,
            dpitch * cr + dyaw * cp * sr,
            -dpitch * sr + dyaw * cp * cr,
        )
    }

    /// Specific force in the body frame.
    pub fn specific_force(&self, gravity: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().inverse().rotate(&(self.acceleration - gravity))
    }

    pub fn nav_state(&self, t: f64) -> NavState {
        NavState::new(self.rotation(), self.velocity, self.position, t)
    }
}

/// `a·sin(f·t + φ)` with derivatives.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (s, c) = (self.freq * t + self.phase).sin_cos();
        (
            self.amp * s,
            self.amp * self.freq * c,
            -self.amp * self.freq * self.freq * s,
        )
    }

    fn random(rng: &mut ChaCha8Rng, amp: (f64, f64), freq: (f64, f64)) -> Self {
        Wave {
            amp: rng.random_range(amp.0..amp.1),
            freq: rng.random_range(freq.0..freq.1),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }
}

fn sum_waves(waves: &[Wave], t: f64) -> (f64, f64, f64) {
    waves.iter().fold((0.0, 0.0, 0.0), |acc, w| {
        let (x, dx, ddx) = w.eval(t);
        (acc.0 + x, acc.1 + dx, acc.2 + ddx)
    })
}

/// Quintic time scaling `s(τ) = 10τ³ − 15τ⁴ + 6τ⁵` and its τ-derivatives.
fn quintic(tau: f64) -> (f64, f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    let (t2, t3) = (t * t, t * t * t);
    (
        10.0 * t3 - 15.0 * t3 * t + 6.0 * t3 * t2,
        30.0 * t2 - 60.0 * t3 + 30.0 * t2 * t2,
        60.0 * t - 180.0 * t2 + 120.0 * t3,
    )
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Turn {
        start: f64,
        length: f64,
        at: Vector3<f64>,
        from: f64,
        to: f64,
    },
    Move {
        start: f64,
        length: f64,
        from: Vector3<f64>,
        to: Vector3<f64>,
        yaw: f64,
    },
}

impl Phase {
    fn start(&self) -> f64 {
        match *self {
            Phase::Turn { start, .. } | Phase::Move { start, .. } => start,
        }
    }

    fn eval(&self, t: f64) -> Kinematics {
        match *self {
            Phase::Turn {
                start,
                length,
                at,
                from,
                to,
            } => {
                let (s, ds, _) = quintic((t - start) / length);
                let mut k = Kinematics::still(at, from + (to - from) * s);
                k.angle_rates[0] = (to - from) * ds / length;
                k
            }
            Phase::Move {
                start,
                length,
                from,
                to,
                yaw,
            } => {
                let (s, ds, dds) = quintic((t - start) / length);
                let d = to - from;
                Kinematics {
                    position: from + d * s,
                    velocity: d * (ds / length),
                    acceleration: d * (dds / (length * length)),
                    angles: [yaw, 0.0, 0.0],
                    angle_rates: [0.0; 3],
                }
            }
        }
    }
}

/// A recipe instantiated with its random parameters.
#[derive(Debug, Clone)]
pub struct Motion(MotionKind);

#[derive(Debug, Clone)]
enum MotionKind {
    FigureEight { amp: f64, omega: f64 },
    Static { position: Vector3<f64>, yaw: f64 },
    RandomSmooth { position: [Vec<Wave>; 3], angles: [Vec<Wave>; 3] },
    Polyline { phases: Vec<Phase> },
}

const POLYLINE_SPEED: f64 = 1.5;
const POLYLINE_YAW_RATE: f64 = 0.5;
const POLYLINE_MIN_TURN: f64 = 2.0;
const POLYLINE_MIN_MOVE: f64 = 4.0;

impl Motion {
    pub fn new(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        let a = cfg.amplitude;
        Motion(match cfg.recipe {
            Recipe::FigureEight => MotionKind::FigureEight {
                amp: a,
                omega: std::f64::consts::TAU / cfg.period,
            },
            Recipe::Static => MotionKind::Static {
                position: Vector3::new(0.0, 0.0, 0.5),
                yaw: 0.3,
            },
            Recipe::RandomSmooth => {
                let mut waves = |amp: (f64, f64), freq: (f64, f64)| (0..3).map(|_| Wave::random(rng, amp, freq)).collect::<Vec<_>>();
                let position = [waves((0.2 * a, 0.4 * a), (0.05, 0.3)), waves((0.1 * a, 0.25 * a), (0.05, 0.3)), waves((0.1, 0.3), (0.1, 0.5))];
                let angles = [waves((0.3, 1.0), (0.05, 0.3)), waves((0.02, 0.06), (0.1, 0.8)), waves((0.02, 0.06), (0.1, 0.8))];
                MotionKind::RandomSmooth { position, angles }
            }
            Recipe::Polyline => {
                let mut phases = Vec::new();
                let mut at = Vector3::zeros();
                let mut yaw = 0.0;
                let mut t = 0.0;
                while t <= cfg.duration {
                    let to = Vector3::new(rng.random_range(-a..a), rng.random_range(-0.5 * a..0.5 * a), 0.0);
                    let d = to - at;
                    let dist = d.norm();
                    if dist < 1.0 {
                        continue;
                    }
                    let mut heading = d.y.atan2(d.x);
                    // Turn the short way round.
                    while heading - yaw > std::f64::consts::PI {
                        heading -= std::f64::consts::TAU;
                    }
                    while heading - yaw < -std::f64::consts::PI {
                        heading += std::f64::consts::TAU;
                    }
                    let turn = (1.875 * (heading - yaw).abs() / POLYLINE_YAW_RATE).max(POLYLINE_MIN_TURN);
                    phases.push(Phase::Turn {
                        start: t,
                        length: turn,
                        at,
                        from: yaw,
                        to: heading,
                    });
                    t += turn;
                    let length = (1.875 * dist / POLYLINE_SPEED).max(POLYLINE_MIN_MOVE);
                    phases.push(Phase::Move {
                        start: t,
                        length,
                        from: at,
                        to,
                        yaw: heading,
                    });
                    t += length;
                    at = to;
                    yaw = heading;
                }
                MotionKind::Polyline { phases }
            }
        })
    }

    pub fn eval(&self, t: f64) -> Kinematics {
        match &self.0 {
            MotionKind::FigureEight { amp, omega } => figure_eight(*amp, *omega, t),
            MotionKind::Static { position, yaw } => Kinematics::still(*position, *yaw),
            MotionKind::RandomSmooth { position, angles } => {
                let p: Vec<_> = position.iter().map(|w| sum_waves(w, t)).collect();
                let e: Vec<_> = angles.iter().map(|w| sum_waves(w, t)).collect();
                Kinematics {
                    position: Vector3::new(p[0].0, p[1].0, p[2].0),
                    velocity: Vector3::new(p[0].1, p[1].1, p[2].1),
                    acceleration: Vector3::new(p[0].2, p[1].2, p[2].2),
                    angles: [e[0].0, e[1].0, e[2].0],
                    angle_rates: [e[0].1, e[1].1, e[2].1],
                }
            }
            MotionKind::Polyline { phases } => {
                let k = phases.partition_point(|p| p.start() <= t).max(1);
                phases[k - 1].eval(t)
            }
        }
    }
}

fn figure_eight(amp: f64, w: f64, t: f64) -> Kinematics {
    const VERTICAL: f64 = 0.3;
    const ROLL: f64 = 0.05;
    const PITCH: f64 = 0.04;
    let (s1, c1) = (w * t).sin_cos();
    let (s2, c2) = (2.0 * w * t).sin_cos();
    let position = Vector3::new(amp * s1, 0.5 * amp * s2, VERTICAL * s1);
    let velocity = Vector3::new(amp * w * c1, amp * w * c2, VERTICAL * w * c1);
    let acceleration = Vector3::new(-amp * w * w * s1, -2.0 * amp * w * w * s2, -VERTICAL * w * w * s1);
    // Heading follows the horizontal velocity, which never vanishes on this curve.
    let yaw = velocity.y.atan2(velocity.x);
    let speed2 = velocity.x * velocity.x + velocity.y * velocity.y;
    let dyaw = (velocity.x * acceleration.y - velocity.y * acceleration.x) / speed2;
    let (pitch, dpitch) = ((0.7 * w * t + 0.5).sin() * PITCH, (0.7 * w * t + 0.5).cos() * PITCH * 0.7 * w);
    let (roll, droll) = ((1.3 * w * t).sin() * ROLL, (1.3 * w * t).cos() * ROLL * 1.3 * w);
    Kinematics {
        position,
        velocity,
        acceleration,
        angles: [yaw, pitch, roll],
        angle_rates: [dyaw, dpitch, droll],
    }
}

/// Sample times `k / rate` for `k = 0..=floor(duration·rate)`.
fn sample_times(duration: f64, rate: f64) -> impl Iterator<Item = f64> {
    let n = (duration * rate + 1e-9).floor() as usize;
    (0..=n).map(move |k| k as f64 / rate)
}

fn landmarks(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let half = cfg.room_extent.map(|e| 0.5 * e);
    (0..cfg.landmarks)
        .map(|_| Vector3::from_fn(|i, _| rng.random_range(-half[i]..half[i])))
        .collect()
}

/// Nearest `cfg.points_per_scan` landmarks within range, in the sensor frame.
fn scan(cfg: &SimConfig, world: &[Vector3<f64>], state: &NavState, noise: &Normal<f64>, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let range2 = cfg.scan_range * cfg.scan_range;
    let mut visible: Vec<(f64, usize)> = world
        .iter()
        .enumerate()
        .map(|(i, l)| ((l - state.position).norm_squared(), i))
        .filter(|(d2, _)| *d2 <= range2)
        .collect();
    if visible.len() > cfg.points_per_scan {
        visible.select_nth_unstable_by(cfg.points_per_scan, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        visible.truncate(cfg.points_per_scan);
    }
    visible.sort_by_key(|&(_, i)| i);
    let to_sensor = state.rotation.inverse();
    let points = visible
        .iter()
        .map(|&(_, i)| {
            let p = to_sensor.rotate(&(world[i] - state.position));
            p + Vector3::from_fn(|_, _| noise.sample(rng))
        })
        .collect();
    Ok(PointCloud::new(points)?)
}

pub fn simulate(cfg: &SimConfig) -> Result<SequenceBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motion = Motion::new(cfg, &mut rng);
    let world = landmarks(cfg, &mut rng);
    let gravity = Vector3::from(cfg.gravity);
    let gyro_bias = Vector3::from(cfg.gyro_bias);
    let accel_bias = Vector3::from(cfg.accel_bias);
    let normal = |std: f64| Normal::new(0.0, std).map_err(|e| AppError::Config(e.to_string()));
    let (gyro_noise, accel_noise, point_noise) = (normal(cfg.gyro_noise)?, normal(cfg.accel_noise)?, normal(cfg.point_noise)?);

    let imu = sample_times(cfg.duration, cfg.imu_rate)
        .map(|t| {
            let k = motion.eval(t);
            let gyro = k.body_rate() + gyro_bias + Vector3::from_fn(|_, _| gyro_noise.sample(&mut rng));
            let accel = k.specific_force(&gravity) + accel_bias + Vector3::from_fn(|_, _| accel_noise.sample(&mut rng));
            ImuSample::new(t, gyro, accel)
        })
        .collect::<Vec<_>>();

    let truth: Vec<NavState> = sample_times(cfg.duration, cfg.scan_rate)
        .map(|t| motion.eval(t).nav_state(t))
        .collect();
    let scans = truth
        .iter()
        .map(|s| {
            Ok(ScanRecord {
                t: s.t,
                cloud: scan(cfg, &world, s, &point_noise, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let meta = Meta {
        imu_rate: cfg.imu_rate,
        scan_rate: cfg.scan_rate,
        gravity: cfg.gravity,
        extrinsic: Meta::IDENTITY_EXTRINSIC,
        initial_state: Some(truth[0].into()),
    };
    Ok(SequenceBundle {
        meta,
        imu,
        scans,
        ground_truth: Some(Trajectory::new(truth)?),
    })
}
