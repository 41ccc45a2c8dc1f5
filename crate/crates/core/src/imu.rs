//! IMU segments, preintegration and covariance propagation.
//!
//! Measurements are held constant over each sample interval. The interval of
//! sample `k` runs to the next sample's timestamp; the last sample runs to the
//! segment end time.
//!
//! The covariance is propagated on the error state `(δφ, δv, δp)` with a
//! right (body-frame) rotation perturbation, `ΔR_true = ΔR·Exp(δφ)`.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3, Vector6};

use crate::geom::{exp_so3, right_jacobian, skew, Rotation};
use crate::{Error, Result};

pub type Matrix9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// rad/s
    pub gyro: Vector3<f64>,
    /// m/s², specific force
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        ImuSample { t, gyro, accel }
    }

    fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }
}

/// Measurements between two scan times.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSegment {
    samples: Vec<ImuSample>,
    t_start: f64,
    t_end: f64,
}

impl ImuSegment {
    pub fn new(samples: Vec<ImuSample>, t_start: f64, t_end: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "segment needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if !(t_start.is_finite() && t_end.is_finite() && t_start < t_end) {
            return Err(Error::invalid(format!("bad segment bounds [{t_start}, {t_end}]")));
        }
        if let Some(bad) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("sample {bad} has non-finite components")));
        }
        if samples.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::invalid("sample timestamps are not strictly increasing"));
        }
        if samples[0].t < t_start || samples[samples.len() - 1].t > t_end {
            return Err(Error::invalid("samples fall outside the segment bounds"));
        }
        Ok(ImuSegment {
            samples,
            t_start,
            t_end,
        })
    }

    /// Samples of `stream` with `t_start ≤ t < t_end`. `stream` must be sorted.
    pub fn from_stream(stream: &[ImuSample], t_start: f64, t_end: f64) -> Result<Self> {
        let lo = stream.partition_point(|s| s.t < t_start);
        let hi = stream.partition_point(|s| s.t < t_end);
        ImuSegment::new(stream[lo..hi].to_vec(), t_start, t_end)
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Hold interval of each sample.
    pub fn step_durations(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.samples.len();
        (0..n).map(move |k| {
            let next = if k + 1 < n { self.samples[k + 1].t } else { self.t_end };
            next - self.samples[k].t
        })
    }
}

/// Per-sample corrections (`sigma`, added to `[gyro, accel]`) and variances
/// (`eta`, same ordering).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutput {
    pub sigma: Vec<Vector6<f64>>,
    pub eta: Vec<Vector6<f64>>,
}

impl CorrectionOutput {
    /// The same correction and variance for every one of `n` samples.
    pub fn uniform(n: usize, sigma: Vector6<f64>, eta: Vector6<f64>) -> Self {
        CorrectionOutput {
            sigma: vec![sigma; n],
            eta: vec![eta; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    fn check(&self, seg: &ImuSegment) -> Result<()> {
        if self.sigma.len() != seg.len() || self.eta.len() != seg.len() {
            return Err(Error::invalid(format!(
                "correction has {}/{} entries for a {}-sample segment",
                self.sigma.len(),
                self.eta.len(),
                seg.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreintDelta {
    pub dr: Rotation,
    pub dv: Vector3<f64>,
    pub dp: Vector3<f64>,
    /// Ordered (rotation, velocity, position), expressed in the segment's start frame.
    pub cov: Matrix9,
    /// Segment duration.
    pub dt: f64,
}

impl PreintDelta {
    pub fn identity() -> Self {
        PreintDelta {
            dr: Rotation::identity(),
            dv: Vector3::zeros(),
            dp: Vector3::zeros(),
            cov: Matrix9::zeros(),
            dt: 0.0,
        }
    }

    /// One of the three 3x3 diagonal blocks (0 rotation, 1 velocity, 2 position).
    pub fn cov_block(&self, block: usize) -> Matrix3<f64> {
        cov_block(&self.cov, block)
    }
}

pub fn cov_block(cov: &Matrix9, block: usize) -> Matrix3<f64> {
    cov.fixed_view::<3, 3>(3 * block, 3 * block).into_owned()
}

/// World-frame navigation state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NavState {
    pub rotation: Rotation,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
    pub t: f64,
}

impl NavState {
    pub fn new(rotation: Rotation, velocity: Vector3<f64>, position: Vector3<f64>, t: f64) -> Self {
        NavState {
            rotation,
            velocity,
            position,
            t,
        }
    }

    pub fn pose(&self) -> crate::geom::Pose {
        crate::geom::Pose::new(self.rotation, self.position)
    }
}

/// Adds each sample's correction; timestamps are kept.
pub fn correct_segment(seg: &ImuSegment, corr: &CorrectionOutput) -> Result<ImuSegment> {
    corr.check(seg)?;
    let samples = seg
        .samples
        .iter()
        .zip(&corr.sigma)
        .map(|(s, c)| ImuSample {
            t: s.t,
            gyro: s.gyro + c.fixed_rows::<3>(0),
            accel: s.accel + c.fixed_rows::<3>(3),
        })
        .collect();
    Ok(ImuSegment {
        samples,
        t_start: seg.t_start,
        t_end: seg.t_end,
    })
}

/// Rotation, velocity and position increments; `cov` is zero.
pub fn preintegrate(seg: &ImuSegment) -> PreintDelta {
    let mut dr = Rotation::identity();
    let mut dv = Vector3::zeros();
    let mut dp = Vector3::zeros();
    for (s, dt) in seg.samples.iter().zip(seg.step_durations()) {
        let acc = dr.rotate(&s.accel);
        dp += dv * dt + acc * (0.5 * dt * dt);
        dv += acc * dt;
        dr = (dr * exp_so3(&(s.gyro * dt))).renormalized_if_needed();
    }
    PreintDelta {
        dr,
        dv,
        dp,
        cov: Matrix9::zeros(),
        dt: seg.duration(),
    }
}

/// Error-state transition `A_k` for one step at intermediate rotation `dr`.
pub fn transition_matrix(dr: &Rotation, step: &Rotation, accel: &Vector3<f64>, dt: f64) -> Matrix9 {
    let mut a = Matrix9::identity();
    let ra = dr.matrix() * skew(accel);
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra * dt));
    a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ra * (0.5 * dt * dt)));
    a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
    a
}

/// Preintegration of the corrected segment together with the propagated
/// covariance. `sigma0` must be symmetric positive semidefinite and `eta`
/// nonnegative.
pub fn preintegrate_with_covariance(
    seg: &ImuSegment,
    corr: &CorrectionOutput,
    sigma0: &Matrix9,
) -> Result<PreintDelta> {
    corr.check(seg)?;
    check_psd(sigma0, "initial covariance")?;
    if let Some(k) = corr
        .eta
        .iter()
        .position(|e| e.iter().any(|v| !v.is_finite() || *v < 0.0))
    {
        return Err(Error::invalid(format!("eta of sample {k} is negative or non-finite")));
    }
    let mut dr = Rotation::identity();
    let mut dv = Vector3::zeros();
    let mut dp = Vector3::zeros();
    let mut cov = *sigma0;
    for (k, (s, dt)) in seg.samples.iter().zip(seg.step_durations()).enumerate() {
        let gyro = s.gyro + corr.sigma[k].fixed_rows::<3>(0);
        let accel = s.accel + corr.sigma[k].fixed_rows::<3>(3);
        let phi = gyro * dt;
        let step = exp_so3(&phi);
        let eta = &corr.eta[k];

        cov = propagate_step(&cov, &dr, &step, &phi, &accel, eta, dt);

        let acc = dr.rotate(&accel);
        dp += dv * dt + acc * (0.5 * dt * dt);
        dv += acc * dt;
        dr = (dr * step).renormalized_if_needed();
    }
    // Symmetrize away round-off.
    let cov = (cov + cov.transpose()) * 0.5;
    Ok(PreintDelta {
        dr,
        dv,
        dp,
        cov,
        dt: seg.duration(),
    })
}

/// One step of `Σ ← A Σ Aᵀ + B_ω diag(η_ω) B_ωᵀ + B_α diag(η_α) B_αᵀ`.
///
/// `A` is block lower-triangular, so the product is formed blockwise.
fn propagate_step(
    cov: &Matrix9,
    dr: &Rotation,
    step: &Rotation,
    phi: &Vector3<f64>,
    accel: &Vector3<f64>,
    eta: &Vector6<f64>,
    dt: f64,
) -> Matrix9 {
    let a = transition_matrix(dr, step, accel, dt);
    let mut out = a * cov * a.transpose();

    let bw = right_jacobian(phi) * dt;
    let ew = Matrix3::from_diagonal(&eta.fixed_rows::<3>(0).into_owned());
    let qw = bw * ew * bw.transpose();
    let mut rr = out.fixed_view_mut::<3, 3>(0, 0);
    rr += qw;

    let ba_v = dr.matrix() * dt;
    let ba_p = dr.matrix() * (0.5 * dt * dt);
    let ea = Matrix3::from_diagonal(&eta.fixed_rows::<3>(3).into_owned());
    let vv = ba_v * ea * ba_v.transpose();
    let vp = ba_v * ea * ba_p.transpose();
    let pp = ba_p * ea * ba_p.transpose();
    let mut b = out.fixed_view_mut::<3, 3>(3, 3);
    b += vv;
    let mut b = out.fixed_view_mut::<3, 3>(3, 6);
    b += vp;
    let mut b = out.fixed_view_mut::<3, 3>(6, 3);
    b += vp.transpose();
    let mut b = out.fixed_view_mut::<3, 3>(6, 6);
    b += pp;
    out
}

/// Covariance part of [`preintegrate_with_covariance`].
pub fn propagate_covariance(seg: &ImuSegment, corr: &CorrectionOutput, sigma0: &Matrix9) -> Result<Matrix9> {
    preintegrate_with_covariance(seg, corr, sigma0).map(|d| d.cov)
}

/// `R̂ = R·ΔR`, `v̂ = v + g·dt + R·Δv`, `p̂ = p + v·dt + ½g·dt² + R·Δp`.
pub fn propagate_state(prev: &NavState, delta: &PreintDelta, gravity: &Vector3<f64>, dt: f64) -> NavState {
    debug_assert!(dt > 0.0);
    let r = prev.rotation;
    NavState {
        rotation: (r * delta.dr).renormalized_if_needed(),
        velocity: prev.velocity + gravity * dt + r.rotate(&delta.dv),
        position: prev.position + prev.velocity * dt + gravity * (0.5 * dt * dt) + r.rotate(&delta.dp),
        t: prev.t + dt,
    }
}

/// Symmetric within 1e-10 and smallest eigenvalue ≥ −1e-10.
pub fn check_psd(m: &Matrix9, what: &str) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    if (m - m.transpose()).amax() > 1e-10 {
        return Err(Error::invalid(format!("{what} is not symmetric")));
    }
    if m.iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    let min_eig = SymmetricEigen::new(*m).eigenvalues.min();
    if min_eig < -1e-10 {
        return Err(Error::invalid(format!(
            "{what} is not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}
