//! Rotations, rigid transforms and the SO(3) exponential/logarithm.
//!
//! Rotations are stored as 3x3 matrices. The difference operator used
//! everywhere in the crate is the right difference `A ⊟ B := A⁻¹·B`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};

use crate::{Error, Result};

/// Orthonormality error above which long products are re-orthonormalized.
pub const RENORMALIZE_THRESHOLD: f64 = 1e-7;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

/// Above this |cos θ| (with cos θ < 0) the axis is taken from the symmetric part.
const NEAR_PI_COS: f64 = -0.999;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and handedness to within `1e-9`.
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let rot = Rotation(matrix);
        if rot.orthonormality_error() > 1e-9 || (matrix.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("matrix is not a proper rotation"));
        }
        Ok(rot)
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Rotation(matrix)
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        exp_so3(phi)
    }

    pub fn log(&self) -> Vector3<f64> {
        log_so3(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    /// Gram-Schmidt on the columns.
    pub fn renormalized(&self) -> Self {
        let c0 = self.0.column(0).normalize();
        let c1 = self.0.column(1) - c0 * c0.dot(&self.0.column(1));
        let c1 = c1.normalize();
        let c2 = c0.cross(&c1);
        Rotation(Matrix3::from_columns(&[c0, c1, c2]))
    }

    /// Renormalizes only when the orthonormality error exceeds
    /// [`RENORMALIZE_THRESHOLD`].
    pub fn renormalized_if_needed(&self) -> Self {
        if self.orthonormality_error() > RENORMALIZE_THRESHOLD {
            self.renormalized()
        } else {
            *self
        }
    }

    /// Angle of `self⁻¹·other`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        log_so3(&(self.inverse() * *other)).norm()
    }

    /// Unit quaternion `[x, y, z, w]` with `w ≥ 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let trace = m.trace();
        // Shepperd: branch on the largest of (w, x, y, z) to avoid cancellation.
        let (x, y, z, w) = if trace > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
            let s = 2.0 * (1.0 + trace).sqrt();
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
                0.25 * s,
            )
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            (
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(2, 1)] - m[(1, 2)]) / s,
            )
        } else if m[(1, 1)] >= m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            (
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            (
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        };
        let n = (x * x + y * y + z * z + w * w).sqrt();
        let sign = if w < 0.0 { -1.0 } else { 1.0 };
        [sign * x / n, sign * y / n, sign * z / n, sign * w / n]
    }

    /// Accepts any nonzero quaternion `[x, y, z, w]`; it is normalized first.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let [x, y, z, w] = q;
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid("quaternion has zero or non-finite norm"));
        }
        let (x, y, z, w) = (x / n, y / n, z / n, w / n);
        Ok(Rotation(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        )))
    }

    pub fn to_unit_quaternion(&self) -> UnitQuaternion<f64> {
        let [x, y, z, w] = self.to_quaternion();
        UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z))
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::identity()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rigid transform; maps `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose_se3(self, other)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(x) + self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major `R` followed by `t`.
    pub fn to_array12(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    pub fn from_array12(a: &[f64]) -> Result<Pose> {
        if a.len() != 12 {
            return Err(Error::invalid(format!("pose needs 12 values, got {}", a.len())));
        }
        let rotation = Rotation::new(Matrix3::from_row_slice(&a[..9]))?;
        Ok(Pose::new(rotation, Vector3::new(a[9], a[10], a[11])))
    }
}

/// Output of the SE(3) difference: rotation vector and translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotvec: Vector3<f64>,
    pub transvec: Vector3<f64>,
}

impl Twist {
    pub fn is_zero(&self, tol: f64) -> bool {
        self.rotvec.amax() <= tol && self.transvec.amax() <= tol
    }

    pub fn norm_squared(&self) -> f64 {
        self.rotvec.norm_squared() + self.transvec.norm_squared()
    }
}

/// `[v]×`, so that `skew(v)·u = v × u`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let half = 0.5 * theta;
        // 1 − cos θ written as 2 sin²(θ/2) to keep precision for small θ.
        (theta.sin() / theta, 2.0 * half.sin() * half.sin() / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Inverse of [`exp_so3`]; the result has norm in `[0, π]`.
pub fn log_so3(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee(&(m - m.transpose())) * 0.5;
    let sin = w.norm();
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        return w * (1.0 + theta * theta / 6.0);
    }
    if cos > NEAR_PI_COS {
        return w * (theta / sin);
    }
    // Near π the sin θ divisor is useless; the symmetric part equals
    // (1 − cos θ)·a·aᵀ, so take its dominant column.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
    let d = sym.diagonal();
    let i = d.imax();
    let mut axis: Vector3<f64> = sym.column(i).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// `(A·B)`: rotation `R_A·R_B`, translation `R_A·t_B + t_A`.
pub fn compose_se3(a: &Pose, b: &Pose) -> Pose {
    Pose::new(a.rotation * b.rotation, a.rotation.rotate(&b.translation) + a.translation)
}

/// Twist of `A⁻¹·B`: rotation part via [`log_so3`], translation part taken
/// directly from `A⁻¹·B`.
pub fn relative_se3(a: &Pose, b: &Pose) -> Twist {
    let d = compose_se3(&a.inverse(), b);
    Twist {
        rotvec: log_so3(&d.rotation),
        transvec: d.translation,
    }
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() - k * 0.5 + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - k * ((1.0 - theta.cos()) / theta2)
        + k * k * ((theta - theta.sin()) / (theta2 * theta))
}
