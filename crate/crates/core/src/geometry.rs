//! Rigid transforms, pinhole projection and 3D box helpers.
//!
//! Camera frame follows the KITTI rectified convention: `x` right, `y` down,
//! `z` forward. Objects only rotate about the camera/world `y` axis.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `RᵀR − I` and `det R − 1` for a rotation to be accepted.
pub const ROTATION_TOL: f64 = 1e-9;

const DEGENERATE_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate projection: third row value {0:e} is too close to zero")]
    DegenerateProjection(f64),
    #[error("all box corners are behind the camera")]
    BehindCamera,
    #[error("both boxes have zero area")]
    ZeroArea,
    #[error("rotation is not orthonormal (max |RᵀR − I| = {orthogonality:e}, det = {det})")]
    NotARotation { orthogonality: f64, det: f64 },
    #[error("projection matrix has P[2][2] = 0")]
    ZeroDepthColumn,
    #[error("projection matrix left 3x3 block is singular")]
    SingularIntrinsics,
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
}

/// Largest absolute element of `RᵀR − I`.
pub fn orthogonality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validated constructor.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let orthogonality = orthogonality_error(&rotation);
        let det = rotation.determinant();
        if !(orthogonality < ROTATION_TOL && (det - 1.0).abs() < ROTATION_TOL)
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::NotARotation { orthogonality, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose without checking the rotation. Callers guarantee the
    /// matrix came out of a rotation-producing routine.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self {
            rotation: yaw_to_rotation(yaw),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Row-major `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 4 + col] = self.rotation[(row, col)];
            }
            out[row * 4 + 3] = self.translation[row];
        }
        out
    }

    /// Parses a row-major `[R | t]` and validates the rotation.
    pub fn from_row_major(values: &[f64; 12]) -> Result<Pose, GeometryError> {
        let m = Matrix3x4::from_row_slice(values);
        Pose::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.column(3).into_owned(),
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// 3×4 pinhole projection matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(m: Matrix3x4<f64>) -> Result<Self, GeometryError> {
        if m[(2, 2)] == 0.0 {
            return Err(GeometryError::ZeroDepthColumn);
        }
        Ok(Self(m))
    }

    pub fn from_row_slice(values: &[f64; 12]) -> Result<Self, GeometryError> {
        Self::new(Matrix3x4::from_row_slice(values))
    }

    /// Intrinsic-only matrix `K [I | 0]`.
    pub fn from_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self(Matrix3x4::new(
            fx, 0.0, cx, 0.0, //
            0.0, fy, cy, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        ))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..4 {
                out[row * 4 + col] = self.0[(row, col)];
            }
        }
        out
    }

    /// Projects a camera-frame point. Returns `(u, v, depth)` where `depth`
    /// is the third row of `P·[x y z 1]ᵀ`, sign preserved.
    pub fn project_point(&self, p: &Point3<f64>) -> Result<(f64, f64, f64), GeometryError> {
        let h = self.0 * Vector4::new(p.x, p.y, p.z, 1.0);
        let depth = h[2];
        if depth.abs() < DEGENERATE_DEPTH {
            return Err(GeometryError::DegenerateProjection(depth));
        }
        Ok((h[0] / depth, h[1] / depth, depth))
    }

    /// Inverse of [`project_point`](Self::project_point): the camera-frame
    /// point on the ray through `(u, v)` whose projective depth is `depth`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Result<Point3<f64>, GeometryError> {
        let left = self.0.fixed_view::<3, 3>(0, 0).into_owned();
        let inv = left
            .try_inverse()
            .ok_or(GeometryError::SingularIntrinsics)?;
        let rhs = Vector3::new(u * depth, v * depth, depth) - self.0.column(3);
        Ok(Point3::from(inv * rhs))
    }
}

/// Free-function form of [`ProjectionMatrix::project_point`].
pub fn project_point(
    p: &Point3<f64>,
    proj: &ProjectionMatrix,
) -> Result<(f64, f64, f64), GeometryError> {
    proj.project_point(p)
}

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Box2D {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self, GeometryError> {
        let b = Self {
            left,
            top,
            right,
            bottom,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.left, self.top, self.right, self.bottom]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidBox("non-finite coordinate".into()));
        }
        if self.left > self.right || self.top > self.bottom {
            return Err(GeometryError::InvalidBox(format!(
                "left {} > right {} or top {} > bottom {}",
                self.left, self.right, self.top, self.bottom
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.left + self.right),
            0.5 * (self.top + self.bottom),
        )
    }

    /// Overlap with `other`, or `None` when the two boxes do not intersect.
    pub fn intersection(&self, other: &Box2D) -> Option<Box2D> {
        let left = self.left.max(other.left);
        let top = self.top.max(other.top);
        let right = self.right.min(other.right);
        let bottom = self.bottom.min(other.bottom);
        (left <= right && top <= bottom).then_some(Box2D {
            left,
            top,
            right,
            bottom,
        })
    }

    /// Clip to the image rectangle `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Option<Box2D> {
        self.intersection(&Box2D {
            left: 0.0,
            top: 0.0,
            right: width,
            bottom: height,
        })
    }
}

/// Intersection over union. Errors when both boxes are degenerate.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> Result<f64, GeometryError> {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 && area_b <= 0.0 {
        return Err(GeometryError::ZeroArea);
    }
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Cuboid extents in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dimensions3D {
    pub height: f64,
    pub width: f64,
    pub length: f64,
}

impl Dimensions3D {
    pub fn new(height: f64, width: f64, length: f64) -> Result<Self, GeometryError> {
        let d = Self {
            height,
            width,
            length,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = [self.height, self.width, self.length]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidDimensions(format!(
                "h={} w={} l={} must all be positive",
                self.height, self.width, self.length
            )))
        }
    }
}

/// Yaw in radians, wrapped into `(−π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct YawAngle(f64);

impl YawAngle {
    pub fn new(radians: f64) -> Self {
        Self(wrap_angle(radians))
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }
}

impl From<f64> for YawAngle {
    fn from(v: f64) -> Self {
        Self::new(v)
    }
}

impl From<YawAngle> for f64 {
    fn from(y: YawAngle) -> f64 {
        y.0
    }
}

impl fmt::Display for YawAngle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut r = a.rem_euclid(two_pi);
    if r > PI {
        r -= two_pi;
    }
    if r <= -PI {
        r += two_pi;
    }
    r
}

/// Rotation about the `y` axis.
pub fn yaw_to_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(
        c, 0.0, s, //
        0.0, 1.0, 0.0, //
        -s, 0.0, c,
    )
}

/// `arctan2(−R₃₁, √(R₁₁² + R₂₁²))`. Always lands in `[−π/2, π/2]`.
pub fn yaw_formula(r: &Matrix3<f64>) -> f64 {
    (-r[(2, 0)]).atan2((r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt())
}

/// True when `r` has the `R_y` sparsity pattern.
pub fn is_yaw_only(r: &Matrix3<f64>) -> bool {
    [
        r[(0, 1)],
        r[(1, 0)],
        r[(1, 2)],
        r[(2, 1)],
        r[(1, 1)] - 1.0,
    ]
    .iter()
    .all(|v| v.abs() < ROTATION_TOL)
}

/// Yaw of a rotation.
///
/// Uses [`yaw_formula`]; when `r` is a pure `y` rotation facing backwards
/// (`R₁₁ < 0`) the formula's `θ` vs `π − θ` ambiguity is resolved so the
/// full `(−π, π]` range comes back.
pub fn yaw_from_rotation(r: &Matrix3<f64>) -> YawAngle {
    let v = yaw_formula(r);
    if r[(1, 0)].abs() > 0.5 {
        log::warn!(
            "yaw extraction on a rotation with large pitch/roll (|R21| = {:.3})",
            r[(1, 0)].abs()
        );
    }
    if is_yaw_only(r) && r[(0, 0)] < 0.0 {
        let full = if v >= 0.0 { PI - v } else { -PI - v };
        return YawAngle::new(full);
    }
    YawAngle::new(v)
}

/// Number of corners of a cuboid.
pub const CORNERS: usize = 8;

/// Eight corners of the cuboid of size `dims` placed at `pose`.
///
/// The object origin is the centre of the bottom face; the box extends
/// `length` along object `x`, `width` along object `z` and `height` towards
/// `−y` (up, since camera `y` points down). Corners 0–3 are the bottom face
/// (`y = 0`), 4–7 the top face (`y = −h`), each listed counter-clockwise when
/// viewed from `+y`:
/// `(+l/2, +w/2)`, `(+l/2, −w/2)`, `(−l/2, −w/2)`, `(−l/2, +w/2)`.
pub fn box3d_corners(pose: &Pose, dims: &Dimensions3D) -> [Point3<f64>; CORNERS] {
    let (hl, hw, h) = (dims.length / 2.0, dims.width / 2.0, dims.height);
    let footprint = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
    let mut out = [Point3::origin(); CORNERS];
    for (i, &(x, z)) in footprint.iter().enumerate() {
        out[i] = pose.transform_point(&Point3::new(x, 0.0, z));
        out[i + 4] = pose.transform_point(&Point3::new(x, -h, z));
    }
    out
}

/// Hull of the projected corners that lie in front of the camera. No
/// clipping to image bounds.
pub fn project_box(
    corners: &[Point3<f64>],
    proj: &ProjectionMatrix,
) -> Result<Box2D, GeometryError> {
    let mut hull: Option<Box2D> = None;
    for c in corners {
        let (u, v, depth) = match proj.project_point(c) {
            Ok(p) => p,
            Err(GeometryError::DegenerateProjection(_)) => continue,
            Err(e) => return Err(e),
        };
        if depth <= 0.0 {
            continue;
        }
        hull = Some(match hull {
            None => Box2D {
                left: u,
                top: v,
                right: u,
                bottom: v,
            },
            Some(b) => Box2D {
                left: b.left.min(u),
                top: b.top.min(v),
                right: b.right.max(u),
                bottom: b.bottom.max(v),
            },
        });
    }
    hull.ok_or(GeometryError::BehindCamera)
}
