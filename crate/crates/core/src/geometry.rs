//! Pinhole projection algebra shared by the renderer, calibration,
//! triangulation and digital-twin code.
//!
//! Conventions used throughout the crate:
//!
//! * lengths are millimetres;
//! * pixel coordinates are `(u, v) = (column, row)` with the origin at the
//!   centre of the top-left pixel, `+u` right and `+v` down;
//! * a [`RigidPose`] maps world points into the device frame,
//!   `X_dev = R * X_world + t`, and devices look along their local `+z`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4x3, Rotation3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (max |R^T R - I| = {orthogonality:.3e}, det = {det:.12})")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("point projects to infinity (homogeneous scale {0:.3e})")]
    PointAtInfinity(f64),
    #[error("matrix is rank deficient (singular value ratio {0:.3e})")]
    RankDeficient(f64),
}

/// Unit tag carried by configuration and calibration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    Mm,
    Cm,
    M,
}

impl LengthUnit {
    /// Millimetres per unit.
    pub fn scale_to_mm(self) -> f64 {
        match self {
            LengthUnit::Mm => 1.0,
            LengthUnit::Cm => 10.0,
            LengthUnit::M => 1000.0,
        }
    }

    pub fn to_mm(self, value: f64) -> f64 {
        value * self.scale_to_mm()
    }
}

/// Zero-skew pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRaw", into = "IntrinsicsRaw")]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub ox: f64,
    pub oy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRaw {
    fx: f64,
    fy: f64,
    ox: f64,
    oy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsRaw> for Intrinsics {
    type Error = GeometryError;
    fn try_from(r: IntrinsicsRaw) -> Result<Self, Self::Error> {
        Intrinsics::new(r.fx, r.fy, r.ox, r.oy, r.width, r.height)
    }
}

impl From<Intrinsics> for IntrinsicsRaw {
    fn from(k: Intrinsics) -> Self {
        IntrinsicsRaw { fx: k.fx, fy: k.fy, ox: k.ox, oy: k.oy, width: k.width, height: k.height }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, ox: f64, oy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidIntrinsics(msg));
        if width == 0 || height == 0 {
            return bad(format!("image size {width}x{height} must be at least 1x1"));
        }
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={fx}, fy={fy})"));
        }
        if !(ox.is_finite() && ox >= 0.0 && ox < width as f64) {
            return bad(format!("principal point ox={ox} outside [0, {width})"));
        }
        if !(oy.is_finite() && oy >= 0.0 && oy < height as f64) {
            return bad(format!("principal point oy={oy} outside [0, {height})"));
        }
        Ok(Intrinsics { fx, fy, ox, oy, width, height })
    }

    /// Intrinsics with the principal point at the image centre.
    pub fn centered(f: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.ox, 0.0, self.fy, self.oy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        intrinsic_inverse(self)
    }

    pub fn resolution(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// Same focal lengths and principal point with a different raster size.
    pub fn with_resolution(&self, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(self.fx, self.fy, self.ox, self.oy, width, height)
    }
}

/// Closed-form inverse of a zero-skew intrinsic matrix.
pub fn intrinsic_inverse(k: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(
        1.0 / k.fx,
        0.0,
        -k.ox / k.fx,
        0.0,
        1.0 / k.fy,
        -k.oy / k.fy,
        0.0,
        0.0,
        1.0,
    )
}

/// World-to-device rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Largest entry of `|R^T R - I|`.
pub fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let orthogonality = orthogonality_error(&rotation);
        let det = rotation.determinant();
        if !(orthogonality <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE)
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidRotation { orthogonality, det });
        }
        Ok(RigidPose { rotation, translation })
    }

    /// Builds a pose from a matrix that is only approximately a rotation
    /// (e.g. printed with four decimals) by projecting it onto SO(3).
    /// Returns the pose together with the max-entry change the projection made.
    pub fn from_approximate_rotation(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<(Self, f64), GeometryError> {
        let projected = nearest_rotation(&rotation).ok_or(GeometryError::InvalidRotation {
            orthogonality: orthogonality_error(&rotation),
            det: rotation.determinant(),
        })?;
        let change = (projected - rotation).abs().max();
        Ok((RigidPose::new(projected, translation)?, change))
    }

    pub fn identity() -> Self {
        RigidPose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidPose { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        RigidPose { rotation: exp_so3(&axis_angle), translation }
    }

    /// Device pose at `eye` looking at `target`, with image rows running
    /// against `up` (so `up = (0,-1,0)` keeps the world's +y pointing down
    /// in the image).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let z = (target - eye).try_normalize(1e-12).ok_or(GeometryError::RankDeficient(0.0))?;
        let x = z.cross(&up).try_normalize(1e-12).ok_or(GeometryError::RankDeficient(0.0))?;
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let r = nearest_rotation(&r).expect("look_at basis is orthonormal");
        Ok(RigidPose { rotation: r, translation: -(r * eye) })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Device optical centre in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Left-multiplicative update `exp([dω]x) R`, `t + dt`.
    pub fn perturbed(&self, d_rot: &Vector3<f64>, d_trans: &Vector3<f64>) -> RigidPose {
        RigidPose {
            rotation: exp_so3(d_rot) * self.rotation,
            translation: self.translation + d_trans,
        }
    }

    /// `[R | t]` as a 3x4 matrix.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        log_so3(&self.rotation)
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_angle_to(&self, other: &RigidPose) -> f64 {
        log_so3(&(self.rotation.transpose() * other.rotation)).norm()
    }
}

/// Rodrigues exponential map.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*w).matrix()
}

/// Inverse of [`exp_so3`] for a proper rotation.
/// Uses `atan2` on the antisymmetric part so rotations a few ulp away from
/// orthonormal still map to finite vectors.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) / 2.0;
    let sin = w.norm();
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = sin.atan2(cos);
    if sin > 1e-7 {
        return w * (theta / sin);
    }
    if cos > 0.0 {
        // θ ≈ sin θ to second order.
        return w;
    }
    // θ ≈ π: the axis is the dominant column of (R + I).
    let sym = r + Matrix3::identity();
    let col = (0..3).max_by(|&a, &b| sym.column(a).norm().total_cmp(&sym.column(b).norm())).expect("three columns");
    let axis = sym.column(col).normalize();
    let axis = if axis.dot(&w) < 0.0 { -axis } else { axis };
    axis * theta
}

/// Closest rotation in the Frobenius sense, `None` when the SVD fails.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Some(u * d * v_t)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceRole {
    Camera,
    Projector,
}

/// `K [R | t]`, mapping homogeneous world points to homogeneous pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    pub m: Matrix3x4<f64>,
    pub role: DeviceRole,
}

pub fn compose_projection(k: &Intrinsics, pose: &RigidPose, role: DeviceRole) -> ProjectionMatrix {
    ProjectionMatrix { m: k.matrix() * pose.matrix(), role }
}

impl ProjectionMatrix {
    pub fn camera(k: &Intrinsics, pose: &RigidPose) -> Self {
        compose_projection(k, pose, DeviceRole::Camera)
    }

    pub fn projector(k: &Intrinsics, pose: &RigidPose) -> Self {
        compose_projection(k, pose, DeviceRole::Projector)
    }

    /// Homogeneous image of `x` before dehomogenisation.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.m * Vector4::new(x.x, x.y, x.z, 1.0)
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        project_point(self, x)
    }

    /// Splits the matrix back into `(K, R, t)` by RQ decomposition, with
    /// `K` normalised to `K[2][2] = 1` and positive diagonal.
    pub fn decompose(&self) -> Option<(Matrix3<f64>, Matrix3<f64>, Vector3<f64>)> {
        let mut m = self.m;
        let mut left: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        if left.determinant() < 0.0 {
            m = -m;
            left = -left;
        }
        let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
        let qr = (flip * left).transpose().qr();
        let (q, r) = (qr.q(), qr.r());
        let mut k = flip * r.transpose() * flip;
        let mut rot = flip * q.transpose();
        for i in 0..3 {
            if k[(i, i)] < 0.0 {
                k.column_mut(i).neg_mut();
                rot.row_mut(i).neg_mut();
            }
        }
        let scale = k[(2, 2)];
        if scale.abs() < 1e-300 {
            return None;
        }
        let t = k.try_inverse()? * m.column(3);
        Some((k / scale, rot, t))
    }
}

/// Dehomogenised projection of a world point.
pub fn project_point(m: &ProjectionMatrix, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let h = m.apply(x);
    if h.z.abs() <= 1e-12 {
        return Err(GeometryError::PointAtInfinity(h.z));
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalises `direction`; returns `None` for a zero vector.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Option<Ray> {
        direction.try_normalize(1e-300).map(|direction| Ray { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Back-projects pixel `(u, v)` into a world-space ray from the optical centre.
pub fn pixel_ray(k: &Intrinsics, pose: &RigidPose, u: f64, v: f64) -> Ray {
    let local = Vector3::new((u - k.ox) / k.fx, (v - k.oy) / k.fy, 1.0);
    let direction = (pose.rotation().transpose() * local).normalize();
    Ray { origin: pose.center(), direction }
}

/// Moore–Penrose pseudo-inverse of a 3x4 extrinsic matrix via SVD.
pub fn extrinsic_pseudo_inverse(mext: &Matrix3x4<f64>) -> Result<Matrix4x3<f64>, GeometryError> {
    // SVD of the 4x3 transpose gives a thin factorisation with three singular values.
    let svd = mext.transpose().svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::RankDeficient(0.0)),
    };
    let s = svd.singular_values;
    let s_max = s.max();
    let s_min = s.min();
    if !(s_max > 0.0) || s_min < 1e-10 * s_max {
        return Err(GeometryError::RankDeficient(if s_max > 0.0 { s_min / s_max } else { 0.0 }));
    }
    // mext^T = U S V^T  =>  pinv(mext) = (pinv(mext^T))^T = U S^-1 V^T.
    let s_inv = Matrix3::from_diagonal(&s.map(|x| 1.0 / x));
    Ok(u * s_inv * v_t)
}
