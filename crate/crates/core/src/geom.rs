//! Rigid-body math: SE(3) transforms, weighted Procrustes alignment,
//! projection onto SO(3) and convex blending of rigid motions.
//!
//! Everything here works in `f64`. The backward helpers at the bottom of the
//! file (`polar_backward`, `quat_matrix_backward`, `skew`, `vee_antisym`) are
//! used by the motion-field and Gaussian gradient code.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Quat::identity(), translation)
    }

    /// Rotation about `axis` (need not be unit) by `angle` radians.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self::new(Quat::from_axis_angle(&axis, angle), translation)
    }

    /// Builds a transform from a rotation matrix that is already orthonormal
    /// up to round-off. Use [`project_to_so3`] for arbitrary matrices.
    pub fn from_rt(rotation: &Mat3, translation: Vec3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(Quat::from_rotation_matrix(&rot), translation)
    }

    /// Reads the upper 3x4 block of a homogeneous matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_rt(&r, t)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(&self.rotation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let inv = self.rotation.inverse();
        Se3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotation angle (radians) and translation distance between two transforms.
    pub fn distance(&self, other: &Se3) -> (f64, f64) {
        (
            self.rotation.angle_to(&other.rotation),
            (self.translation - other.translation).norm(),
        )
    }

    /// Equality as rigid motions: `q` and `-q` compare equal.
    pub fn approx_eq(&self, other: &Se3, tol: f64) -> bool {
        let (a, t) = self.distance(other);
        a <= tol && t <= tol
    }
}

impl Mul for Se3 {
    type Output = Se3;
    fn mul(self, rhs: Se3) -> Se3 {
        self.compose(&rhs)
    }
}

impl Mul<&Se3> for &Se3 {
    type Output = Se3;
    fn mul(self, rhs: &Se3) -> Se3 {
        self.compose(rhs)
    }
}

/// Rotation matrix of a unit quaternion, written out explicitly so that the
/// analytic derivative in [`quat_matrix_backward`] matches it term by term.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let q = q.quaternion();
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Mat3::new(
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

/// Quaternion from `(w, x, y, z)` components, normalized.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Quat {
    UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
}

pub fn quat_wxyz(q: &Quat) -> [f64; 4] {
    let q = q.quaternion();
    [q.w, q.i, q.j, q.k]
}

/// Gradient with respect to the raw `(w, x, y, z)` components of a quaternion
/// that is normalized before use, given `g_r = dL/dR`.
pub fn quat_matrix_backward(q: &Quat, g_r: &Mat3) -> Vector4<f64> {
    let [w, x, y, z] = quat_wxyz(q);
    let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g = Vector4::new(
        g_r.component_mul(&dw).sum(),
        g_r.component_mul(&dx).sum(),
        g_r.component_mul(&dy).sum(),
        g_r.component_mul(&dz).sum(),
    );
    // normalization Jacobian at |q| = 1
    let qv = Vector4::new(w, x, y, z);
    g - qv * qv.dot(&g)
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(A32 - A23, A13 - A31, A21 - A12)`, so that `<A, skew(w)> = w · vee_antisym(A)`.
pub fn vee_antisym(a: &Mat3) -> Vec3 {
    Vec3::new(
        a[(2, 1)] - a[(1, 2)],
        a[(0, 2)] - a[(2, 0)],
        a[(1, 0)] - a[(0, 1)],
    )
}

/// Exponential map of an axis-angle vector.
pub fn exp_so3(omega: &Vec3) -> Quat {
    Quat::from_scaled_axis(*omega)
}

/// Points with non-negative weights, the input of [`weighted_procrustes`].
#[derive(Clone, Debug)]
pub struct WeightedPointSet {
    points: Vec<Vec3>,
    weights: Vec<f64>,
}

impl WeightedPointSet {
    pub fn new(points: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::CountMismatch {
                what: "points vs weights",
                expected: points.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::WeightError("weights must be finite and non-negative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::WeightError("weights sum to zero".into()));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<Vec3>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Weighted Kabsch: the rigid transform minimizing
/// `Σ w_j |R src_j + t - dst_j|²`. Both sets must carry the same weights.
pub fn weighted_procrustes(src: &WeightedPointSet, dst: &WeightedPointSet) -> Result<Se3> {
    if src.len() != dst.len() {
        return Err(Error::CountMismatch {
            what: "procrustes point sets",
            expected: src.len(),
            found: dst.len(),
        });
    }
    if src.weights != dst.weights {
        return Err(Error::WeightError(
            "source and destination weights differ".into(),
        ));
    }
    procrustes_weighted_slices(&src.points, &dst.points, &src.weights)
}

/// Slice-level variant of [`weighted_procrustes`] used by the hierarchy builder.
pub fn procrustes_weighted_slices(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<Se3> {
    let n = src.len();
    if dst.len() != n || weights.len() != n {
        return Err(Error::CountMismatch {
            what: "procrustes point sets",
            expected: n,
            found: dst.len().min(weights.len()),
        });
    }
    let active = weights.iter().filter(|w| **w > 0.0).count();
    if active < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{active} weighted correspondences, need at least 3"
        )));
    }
    let total: f64 = weights.iter().sum();
    let mut c_src = Vec3::zeros();
    let mut c_dst = Vec3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        c_src += s * *w;
        c_dst += d * *w;
    }
    c_src /= total;
    c_dst /= total;

    let mut h = Mat3::zeros();
    for ((s, d), w) in src.iter().zip(dst).zip(weights) {
        h += (s - c_src) * (d - c_dst).transpose() * *w;
    }

    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let (imax, smax) = sv.argmax();
    let (imin, _) = sv.argmin();
    let mid = 3 - imax - imin;
    if smax <= 0.0 || sv[mid] <= 1e-12 * smax || imax == imin {
        return Err(Error::DegenerateGeometry(
            "weighted cross-covariance has rank below 2".into(),
        ));
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut diag = Mat3::identity();
    diag[(imin, imin)] = d;
    let r = v * diag * u.transpose();
    let t = c_dst - r * c_src;
    Ok(Se3::from_rt(&r, t))
}

/// Closest rotation (Frobenius norm) to `m`.
pub fn project_to_so3(m: &Mat3) -> Result<Quat> {
    Ok(Quat::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        project_to_so3_matrix(m)?,
    )))
}

pub(crate) fn project_to_so3_matrix(m: &Mat3) -> Result<Mat3> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateGeometry("non-finite matrix".into()));
    }
    let svd = m.svd(true, true);
    let sv = svd.singular_values;
    let (_, smax) = sv.argmax();
    let (imin, smin) = sv.argmin();
    if smax <= 1e-12 || smin <= 1e-12 * smax.max(1.0) {
        return Err(Error::DegenerateGeometry("matrix is singular".into()));
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    let mut diag = Mat3::identity();
    diag[(imin, imin)] = d;
    Ok(u * diag * v_t)
}

/// Backward pass of `R = project_to_so3(M)`: maps `dL/dR` to `dL/dM`.
///
/// With `S = RᵀM` symmetric, a perturbation satisfies `Rᵀ dR = [ω]×` where
/// `(tr(S) I - S) ω = vee(RᵀdM - dMᵀR)`.
pub fn polar_backward(m: &Mat3, r: &Mat3, g_r: &Mat3) -> Mat3 {
    let s = r.transpose() * m;
    let k = Mat3::identity() * s.trace() - s;
    let g = vee_antisym(&(r.transpose() * g_r));
    let h = match k.try_inverse() {
        Some(kinv) => kinv * g,
        None => Vec3::zeros(),
    };
    r * skew(&h)
}

fn validate_blend_weights(n_patterns: usize, weights: &[f64]) -> Result<()> {
    if n_patterns == 0 || n_patterns != weights.len() {
        return Err(Error::CountMismatch {
            what: "blend patterns vs weights",
            expected: n_patterns,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::WeightError("blend weights must be non-negative".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::WeightError(format!("blend weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Convex blend of rigid motions: translations are averaged linearly and the
/// averaged rotation matrix is projected back onto SO(3).
pub fn blend_se3(patterns: &[Se3], weights: &[f64]) -> Result<Se3> {
    validate_blend_weights(patterns.len(), weights)?;
    let mut nonzero = weights.iter().enumerate().filter(|(_, w)| **w > 0.0);
    if let (Some((k, _)), None) = (nonzero.next(), nonzero.next()) {
        return Ok(patterns[k]);
    }
    let mut m = Mat3::zeros();
    let mut t = Vec3::zeros();
    for (p, w) in patterns.iter().zip(weights) {
        m += p.rotation_matrix() * *w;
        t += p.translation * *w;
    }
    Ok(Se3::new(project_to_so3(&m)?, t))
}
