//! Quaternion and dual-quaternion algebra for rigid transforms.
//!
//! A rigid transform `x -> R x + t` is carried as a unit dual quaternion
//! `real + eps * dual`, where `real` is the rotation quaternion and
//! `dual = 0.5 * (0, t) * real`. The flat 8-value layout used by the
//! network head and checkpoints is `(real w, x, y, z, dual w, x, y, z)`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Tolerance for unit-norm and rigidity checks.
pub const RIGID_TOL: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
    pub const ZERO: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    /// Pure quaternion `(0, v)`.
    pub fn pure(v: &Vector3<f64>) -> Self {
        Quaternion::new(0.0, v.x, v.y, v.z)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > DEGENERATE_NORM) {
            return Err(Error::invalid("rotation axis has zero length"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Ok(Quaternion::new(c, s * a.x, s * a.y, s * a.z))
    }

    /// Unit quaternion for a rotation matrix (Shepperd's branch selection).
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Self {
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.scale(1.0 / q.norm())
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn conj(&self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, o: &Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Self {
        Quaternion::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() < RIGID_TOL
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let q = self.scale(1.0 / self.norm());
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Whether this quaternion lies in the canonical hemisphere: `w > 0`, or
    /// `w == 0` and the first nonzero vector component is positive.
    pub fn is_canonical(&self) -> bool {
        if self.w != 0.0 {
            return self.w > 0.0;
        }
        [self.x, self.y, self.z]
            .into_iter()
            .find(|v| *v != 0.0)
            .is_none_or(|v| v > 0.0)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w + b.w, self.x + b.x, self.y + b.y, self.z + b.z)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, b: Quaternion) -> Quaternion {
        Quaternion::new(self.w - b.w, self.x - b.x, self.y - b.y, self.z - b.z)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        self.scale(-1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion,
    pub dual: Quaternion,
}

impl DualQuaternion {
    pub const IDENTITY: DualQuaternion = DualQuaternion {
        real: Quaternion::IDENTITY,
        dual: Quaternion::ZERO,
    };

    pub fn new(real: Quaternion, dual: Quaternion) -> Self {
        DualQuaternion { real, dual }
    }

    /// Reads the `(real wxyz, dual wxyz)` storage layout.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 8 {
            return Err(Error::invalid(format!(
                "dual quaternion needs 8 values, got {}",
                v.len()
            )));
        }
        Ok(DualQuaternion::new(
            Quaternion::from_slice(&v[..4]),
            Quaternion::from_slice(&v[4..]),
        ))
    }

    pub fn to_array(self) -> [f64; 8] {
        let [a, b, c, d] = self.real.to_array();
        let [e, f, g, h] = self.dual.to_array();
        [a, b, c, d, e, f, g, h]
    }

    pub fn is_unit(&self) -> bool {
        self.real.is_unit() && self.real.dot(&self.dual).abs() < RIGID_TOL
    }

    /// Translation encoded by a unit dual quaternion: vector part of `2 dual conj(real)`.
    pub fn translation(&self) -> Vector3<f64> {
        (self.dual * self.real.conj()).scale(2.0).vector()
    }

    /// Same transform with the real part moved to the canonical hemisphere.
    /// Both parts flip sign together, so the encoded transform is unchanged.
    pub fn canonical(self) -> Self {
        if self.real.is_canonical() {
            self
        } else {
            DualQuaternion::new(-self.real, -self.dual)
        }
    }

    pub fn inverse(&self) -> Self {
        DualQuaternion::new(self.real.conj(), self.dual.conj())
    }
}

/// Builds the unit dual quaternion for rotation `rotation` followed by translation `t`.
pub fn dq_from_rt(rotation: Quaternion, translation: &Vector3<f64>) -> Result<DualQuaternion> {
    if !rotation.is_finite() || !rotation.is_unit() {
        return Err(Error::invalid(format!(
            "rotation quaternion is not unit (norm {})",
            rotation.norm()
        )));
    }
    let dual = (Quaternion::pure(translation) * rotation).scale(0.5);
    Ok(DualQuaternion::new(rotation, dual))
}

/// Converts a dual quaternion to its 4x4 rigid matrix. The input is normalized first.
pub fn dq_to_matrix(dq: &DualQuaternion) -> Result<PoseMatrix> {
    let dq = dq_normalize(dq)?;
    let r = dq.real.to_rotation_matrix();
    let t = dq.translation();
    Ok(PoseMatrix::from_parts_unchecked(&r, &t))
}

/// Dual-quaternion product; the result encodes `a` applied after `b`.
pub fn dq_compose(a: &DualQuaternion, b: &DualQuaternion) -> Result<DualQuaternion> {
    if !a.is_unit() || !b.is_unit() {
        return Err(Error::invalid("dq_compose requires unit dual quaternions"));
    }
    Ok(DualQuaternion::new(
        a.real * b.real,
        a.real * b.dual + a.dual * b.real,
    ))
}

/// Projects an arbitrary 8-vector onto the unit dual quaternions: the real part is
/// scaled to unit norm and the dual part is made orthogonal to it. The dual part
/// keeps its scale, matching a loss that normalizes only the real part.
pub fn dq_normalize(dq: &DualQuaternion) -> Result<DualQuaternion> {
    let n = dq.real.norm();
    if !(n >= DEGENERATE_NORM) {
        return Err(Error::DegenerateTransform(format!(
            "real part norm {n} is too small to normalize"
        )));
    }
    let real = dq.real.scale(1.0 / n);
    let dual = dq.dual - real.scale(real.dot(&dq.dual));
    Ok(DualQuaternion::new(real, dual))
}

fn check_batch(pred: &[DualQuaternion], gt: &[DualQuaternion]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "loss batch sizes differ or are empty: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance between predicted and ground-truth dual parts.
pub fn dual_loss(pred: &[DualQuaternion], gt: &[DualQuaternion]) -> Result<f64> {
    check_batch(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.dual - g.dual).norm())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean distance between the normalized predicted real part and the ground-truth real part.
pub fn real_loss(pred: &[DualQuaternion], gt: &[DualQuaternion]) -> Result<f64> {
    check_batch(pred, gt)?;
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let n = p.real.norm();
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateTransform(format!(
                "predicted real part norm {n}"
            )));
        }
        sum += (p.real.scale(1.0 / n) - g.real).norm();
    }
    Ok(sum / pred.len() as f64)
}

pub fn total_loss(pred: &[DualQuaternion], gt: &[DualQuaternion], lambda_dual: f64) -> Result<f64> {
    if !(lambda_dual >= 0.0) {
        return Err(Error::invalid("lambda_dual must be non-negative"));
    }
    Ok(real_loss(pred, gt)? + lambda_dual * dual_loss(pred, gt)?)
}

/// A validated 4x4 rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMatrix(Matrix4<f64>);

impl PoseMatrix {
    pub fn identity() -> Self {
        PoseMatrix(Matrix4::identity())
    }

    /// Validates orthonormality, `det = +1` and the bottom row.
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("transform has non-finite entries"));
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        let bottom =
            (m[(3, 0)].abs() + m[(3, 1)].abs() + m[(3, 2)].abs() + (m[(3, 3)] - 1.0).abs())
                .max(0.0);
        if ortho > RIGID_TOL || (det - 1.0).abs() > RIGID_TOL || bottom > RIGID_TOL {
            return Err(Error::invalid(format!(
                "matrix is not rigid (orthonormality residual {ortho:.3e}, det {det:.9})"
            )));
        }
        Ok(PoseMatrix(m))
    }

    pub fn from_parts(r: &Matrix3<f64>, t: &Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        PoseMatrix::new(m)
    }

    pub(crate) fn from_parts_unchecked(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        PoseMatrix(m)
    }

    /// Rigid transform from an axis-angle rotation vector and a translation.
    pub fn from_axis_angle(rotvec: &Vector3<f64>, t: &Vector3<f64>) -> Self {
        let r = Rotation3::new(*rotvec).into_inner();
        PoseMatrix::from_parts_unchecked(&r, t)
    }

    pub fn translation_only(t: &Vector3<f64>) -> Self {
        PoseMatrix::from_parts_unchecked(&Matrix3::identity(), t)
    }

    /// Projects the rotation block onto SO(3) and zeroes the bottom row.
    pub fn reorthonormalized(m: &Matrix4<f64>) -> Self {
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        PoseMatrix::from_parts_unchecked(&orthonormalize(&r), &t)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        PoseMatrix::from_parts_unchecked(&rt, &t)
    }

    pub fn compose(&self, other: &PoseMatrix) -> Self {
        PoseMatrix(self.0 * other.0)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Rotation angle in radians, with the arccos argument clamped to [-1, 1].
    pub fn rotation_angle(&self) -> f64 {
        let r = self.rotation();
        (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0).acos()
    }

    /// Max-abs deviation of `RᵀR` from identity.
    pub fn orthonormality_residual(&self) -> f64 {
        let r = self.rotation();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    pub fn to_dual_quaternion(&self) -> DualQuaternion {
        let q = Quaternion::from_rotation_matrix(&self.rotation());
        let t = self.translation();
        let dual = (Quaternion::pure(&t) * q).scale(0.5);
        DualQuaternion::new(q, dual)
    }

    /// Row-major top 3x4 block.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major_3x4(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::invalid(format!(
                "expected 12 values, got {}",
                v.len()
            )));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[r * 4 + c];
            }
        }
        PoseMatrix::new(m)
    }
}

impl TryFrom<Matrix4<f64>> for PoseMatrix {
    type Error = Error;
    fn try_from(m: Matrix4<f64>) -> Result<Self> {
        PoseMatrix::new(m)
    }
}

/// Nearest rotation matrix in the Frobenius sense (SVD projection with reflection guard).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}
