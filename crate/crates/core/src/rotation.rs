//! 6D continuous rotation representation and rotation error measures.
//!
//! A [`Rotation6D`] holds the first two columns of a rotation matrix before
//! orthonormalization. [`r6_to_matrix`] maps it onto SO(3) with Gram–Schmidt,
//! [`matrix_to_r6`] goes back by taking the first two columns.
//!
//! Euler decompositions use the extrinsic XYZ convention throughout:
//! `R = Rz(z) · Ry(y) · Rx(x)`.

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for near-zero / near-parallel 6D inputs.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Tolerance for orthonormality and unit determinant checks.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D rotation: {0}")]
    Degenerate(&'static str),
    #[error("matrix is not a proper rotation (orthonormality error {0:e})")]
    NotOrthonormal(f64),
}

/// Two 3-vectors whose Gram–Schmidt orthonormalization defines a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D {
    pub a1: Vector3<f64>,
    pub a2: Vector3<f64>,
}

impl Rotation6D {
    pub fn new(a1: Vector3<f64>, a2: Vector3<f64>) -> Self {
        Self { a1, a2 }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::x(), Vector3::y())
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::from_array([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    /// Re-projects onto the canonical representative (the first two columns
    /// of the orthonormalized matrix).
    pub fn normalized(&self) -> Result<Self, RotationError> {
        let m = r6_to_matrix(self)?;
        Ok(Self::new(m.column(0).into_owned(), m.column(1).into_owned()))
    }
}

/// Gram–Schmidt: `b1 = a1/|a1|`, `b2 = normalize(a2 - (b1·a2) b1)`, `b3 = b1 × b2`.
pub fn r6_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>, RotationError> {
    let n1 = r.a1.norm();
    if !n1.is_finite() || n1 < DEGENERACY_TOL {
        return Err(RotationError::Degenerate("first vector is near zero"));
    }
    let b1 = r.a1 / n1;
    let u = r.a2 - b1 * b1.dot(&r.a2);
    let nu = u.norm();
    if !nu.is_finite() || nu < DEGENERACY_TOL * r.a2.norm().max(1.0) {
        return Err(RotationError::Degenerate("vectors are near parallel"));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Partial derivatives of [`r6_to_matrix`] with respect to each of the six
/// parameters, in the order `(a1.x, a1.y, a1.z, a2.x, a2.y, a2.z)`.
pub fn r6_to_matrix_jacobian(r: &Rotation6D) -> Result<[Matrix3<f64>; 6], RotationError> {
    let n1 = r.a1.norm();
    if !n1.is_finite() || n1 < DEGENERACY_TOL {
        return Err(RotationError::Degenerate("first vector is near zero"));
    }
    let b1 = r.a1 / n1;
    let s = b1.dot(&r.a2);
    let u = r.a2 - b1 * s;
    let nu = u.norm();
    if !nu.is_finite() || nu < DEGENERACY_TOL * r.a2.norm().max(1.0) {
        return Err(RotationError::Degenerate("vectors are near parallel"));
    }
    let b2 = u / nu;
    let proj1 = (Matrix3::identity() - b1 * b1.transpose()) / n1;
    let proj2 = (Matrix3::identity() - b2 * b2.transpose()) / nu;

    let mut out = [Matrix3::zeros(); 6];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut e = Vector3::zeros();
        e[k % 3] = 1.0;
        let (da1, da2) = if k < 3 {
            (e, Vector3::zeros())
        } else {
            (Vector3::zeros(), e)
        };
        let db1 = proj1 * da1;
        let ds = db1.dot(&r.a2) + b1.dot(&da2);
        let du = da2 - b1 * ds - db1 * s;
        let db2 = proj2 * du;
        let db3 = db1.cross(&b2) + b1.cross(&db2);
        *slot = Matrix3::from_columns(&[db1, db2, db3]);
    }
    Ok(out)
}

/// Largest absolute entry of `RᵀR - I`, combined with the determinant error.
pub fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    let gram = m.transpose() * m - Matrix3::identity();
    let ortho = gram.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    ortho.max((m.determinant() - 1.0).abs())
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let err = orthonormality_error(m);
    err.is_finite() && err <= tol
}

pub fn ensure_rotation(m: &Matrix3<f64>) -> Result<(), RotationError> {
    let err = orthonormality_error(m);
    if err.is_finite() && err <= ORTHONORMAL_TOL {
        Ok(())
    } else {
        Err(RotationError::NotOrthonormal(err))
    }
}

pub fn matrix_to_r6(m: &Matrix3<f64>) -> Result<Rotation6D, RotationError> {
    ensure_rotation(m)?;
    Ok(Rotation6D::new(
        m.column(0).into_owned(),
        m.column(1).into_owned(),
    ))
}

/// Rotation of `degrees` about `axis` (need not be normalized).
pub fn axis_angle(axis: Vector3<f64>, degrees: f64) -> Matrix3<f64> {
    let axis = Unit::new_normalize(axis);
    nalgebra::Rotation3::from_axis_angle(&axis, degrees.to_radians()).into_inner()
}

/// Geodesic distance on SO(3), in degrees.
pub fn geodesic_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let c = (((ra.transpose() * rb).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees().clamp(0.0, 180.0)
}

/// Extrinsic XYZ Euler angles in degrees, `R = Rz(z) · Ry(y) · Rx(x)`.
pub fn euler_xyz(m: &Matrix3<f64>) -> Vector3<f64> {
    let y = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    let x = m[(2, 1)].atan2(m[(2, 2)]);
    let z = m[(1, 0)].atan2(m[(0, 0)]);
    Vector3::new(x.to_degrees(), y.to_degrees(), z.to_degrees())
}

/// Builds `Rz(z) · Ry(y) · Rx(x)` from degrees.
pub fn from_euler_xyz(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    axis_angle(Vector3::z(), z) * axis_angle(Vector3::y(), y) * axis_angle(Vector3::x(), x)
}

/// Absolute difference of two angles in degrees, wrapped into [0, 180].
pub fn wrapped_angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerErrors {
    /// Per-axis errors (x, y, z) in degrees, each in [0, 180].
    pub errors: [f64; 3],
    /// Either decomposition sits within 1e-6° of the y = ±90° singularity.
    pub gimbal_lock: bool,
}

impl EulerErrors {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / 3.0
    }
}

pub fn euler_angle_errors(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> EulerErrors {
    let ep = euler_xyz(pred);
    let eg = euler_xyz(gt);
    let near_lock = |e: &Vector3<f64>| (e.y.abs() - 90.0).abs() < 1e-6;
    EulerErrors {
        errors: [
            wrapped_angle_diff(ep.x, eg.x),
            wrapped_angle_diff(ep.y, eg.y),
            wrapped_angle_diff(ep.z, eg.z),
        ],
        gimbal_lock: near_lock(&ep) || near_lock(&eg),
    }
}
