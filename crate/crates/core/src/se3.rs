//! Rigid-transform arithmetic.
//!
//! Rotations are always stored as 3x3 matrices. Axis-angle, rotation vectors
//! and quaternions only appear at conversion boundaries.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Proper orthonormal 3x3 rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

/// Unit rotation axis and an angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle {
    axis: Vec3,
    angle: f64,
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform3 {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl AxisAngle {
    /// Normalizes `axis`. A zero axis is only accepted together with a zero
    /// angle, in which case the result is the identity about +z.
    pub fn new(axis: Vec3, angle: f64) -> Result<Self> {
        if !axis.iter().all(|v| v.is_finite()) || !angle.is_finite() {
            return Err(Error::InvalidInput("non-finite axis-angle".into()));
        }
        let norm = axis.norm();
        if norm == 0.0 {
            if angle != 0.0 {
                return Err(Error::InvalidInput(
                    "zero-norm rotation axis with nonzero angle".into(),
                ));
            }
            return Ok(AxisAngle {
                axis: Vec3::z(),
                angle: 0.0,
            });
        }
        Ok(AxisAngle {
            axis: axis / norm,
            angle,
        })
    }

    /// Interprets a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(v: &Vec3) -> Result<Self> {
        let angle = v.norm();
        if angle == 0.0 {
            return AxisAngle::new(Vec3::zeros(), 0.0);
        }
        AxisAngle::new(*v, angle)
    }

    pub fn axis(&self) -> Vec3 {
        self.axis
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn rotation_vector(&self) -> Vec3 {
        self.axis * self.angle
    }
}

/// Rodrigues formula.
pub fn axis_angle_to_rotation(axis: Vec3, angle: f64) -> Result<Rotation3> {
    Ok(Rotation3::from_axis_angle(&AxisAngle::new(axis, angle)?))
}

#[inline]
pub fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Default for Rotation3 {
    fn default() -> Self {
        Rotation3::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    /// Accepts a matrix that is orthonormal with determinant +1 to within `1e-6`,
    /// then re-orthonormalizes it.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite rotation matrix".into()));
        }
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "matrix is not a rotation (orthogonality error {err:.3e}, det {det:.6})"
            )));
        }
        Ok(Rotation3::orthonormalized(m))
    }

    /// Wraps a matrix the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation3(m)
    }

    /// Nearest rotation in the Frobenius sense.
    fn orthonormalized(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            let k = argmin(&svd.singular_values);
            u.column_mut(k).neg_mut();
            r = u * vt;
        }
        Rotation3(r)
    }

    pub fn from_axis_angle(aa: &AxisAngle) -> Self {
        let k = skew(&aa.axis);
        let (s, c) = aa.angle.sin_cos();
        Rotation3(Matrix3::identity() + k * s + k * k * (1.0 - c))
    }

    /// Exponential map of a rotation vector.
    pub fn exp(v: &Vec3) -> Self {
        let theta2 = v.norm_squared();
        let k = skew(v);
        let (a, b) = if theta2 < 1e-12 {
            // Taylor expansion of sin(t)/t and (1-cos t)/t^2.
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Rotation3(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn about_x(angle: f64) -> Self {
        Rotation3::exp(&(Vec3::x() * angle))
    }

    pub fn about_y(angle: f64) -> Self {
        Rotation3::exp(&(Vec3::y() * angle))
    }

    pub fn about_z(angle: f64) -> Self {
        Rotation3::exp(&(Vec3::z() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0` (Shepperd's method).
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let tr = m.trace();
        let q = if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            [
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            ]
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ]
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            [
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ]
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            [
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            ]
        };
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        q.map(|v| sign * v / n)
    }

    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidInput("zero or non-finite quaternion".into()));
        }
        let [w, x, y, z] = q.map(|v| v / n);
        Ok(Rotation3(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )))
    }

    /// Logarithm map; the returned vector has norm in `[0, pi]`.
    pub fn log(&self) -> Vec3 {
        let [w, x, y, z] = self.to_quaternion();
        let v = Vec3::new(x, y, z);
        let s = v.norm();
        if s < 1e-12 {
            // angle ~ 2 s / w for tiny rotations
            return v * (2.0 / w);
        }
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }

    pub fn to_axis_angle(&self) -> AxisAngle {
        let v = self.log();
        AxisAngle::from_rotation_vector(&v).expect("log map is finite")
    }

    /// Geodesic distance in radians.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        (self.inverse() * *other).angle()
    }

    /// Fractional geodesic interpolation: `t = 0` gives `self`, `t = 1` gives `other`.
    pub fn slerp(&self, other: &Rotation3, t: f64) -> Rotation3 {
        let delta = (self.inverse() * *other).log();
        *self * Rotation3::exp(&(delta * t))
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation3 {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation3 {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Default for Transform3 {
    fn default() -> Self {
        Transform3::identity()
    }
}

impl Transform3 {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Self {
        Transform3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Transform3::new(Rotation3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Transform3::new(Rotation3::identity(), t)
    }

    pub fn from_rotation(r: Rotation3) -> Self {
        Transform3::new(r, Vec3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Transform3::new(r_inv, -(r_inv * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Transform3) -> Transform3 {
        Transform3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * *p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * *v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite()) && self.rotation.matrix().iter().all(|v| v.is_finite())
    }
}

impl Mul for Transform3 {
    type Output = Transform3;
    fn mul(self, rhs: Transform3) -> Transform3 {
        self.compose(&rhs)
    }
}

/// Applies `t` to `p`.
pub fn transform_point(t: &Transform3, p: &Vec3) -> Vec3 {
    t.transform_point(p)
}

/// Below this middle singular value of the centered cross-covariance the
/// correspondences are treated as collinear.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Rigid (unit-scale) transform `T` minimizing `sum |T(source_i) - target_i|^2`.
pub fn kabsch_umeyama(source: &[Vec3], target: &[Vec3]) -> Result<Transform3> {
    if source.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "point lists differ in length ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 correspondences, got {}",
            source.len()
        )));
    }
    if !source
        .iter()
        .chain(target)
        .all(|p| p.iter().all(|v| v.is_finite()))
    {
        return Err(Error::InvalidInput("non-finite point".into()));
    }

    let n = source.len() as f64;
    let src_mean = source.iter().sum::<Vec3>() / n;
    let dst_mean = target.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in source.iter().zip(target) {
        cov += (s - src_mean) * (d - dst_mean).transpose();
    }

    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    // A planar set has a vanishing third singular value and is still well posed.
    if sv[order[1]] < DEGENERACY_THRESHOLD {
        return Err(Error::Degenerate(format!(
            "correspondences are collinear or coincident (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[order[0]], sv[order[1]], sv[order[2]]
        )));
    }
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut correction = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        correction[(order[2], order[2])] = -1.0;
    }
    let r = v * correction * u.transpose();
    let rotation = Rotation3::orthonormalized(r);
    let translation = dst_mean - rotation * src_mean;
    Ok(Transform3::new(rotation, translation))
}

fn argmin(v: &Vector3<f64>) -> usize {
    (0..3).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}
