//! SE(3) camera poses, pinhole intrinsics, pose distance and pose-path
//! interpolation.
//!
//! Extrinsics use the world-to-camera convention: `x_cam = R * x_world + t`,
//! with the rotation stored as a unit quaternion `(w, x, y, z)`. This matches
//! how COLMAP stores image poses, so ingestion needs no conversion.

use crate::error::{Error, Result};
use crate::math::{
    add3, mat3_mulv, mat3_tmulv, norm3, quat_conjugate, quat_dot, quat_mul, quat_norm,
    quat_normalize, quat_to_mat3, scale3, sub3, Mat3, Quat, Vec3,
};
use serde::{Deserialize, Serialize};

/// Allowed drift from unit norm for quaternions held by a pose.
pub const UNIT_QUAT_TOL: f64 = 1e-9;
/// Tolerance used when validating caller-supplied quaternions.
const UNIT_QUAT_CHECK_TOL: f64 = 1e-6;

/// Default pose-distance weights.
pub const DEFAULT_LAMBDA_TR: f64 = 1.0;
pub const DEFAULT_LAMBDA_ROT: f64 = 10.0;

/// Near-plane depth below which projected points are behind the camera.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Unit quaternion (w, x, y, z), world-to-camera.
    pub rotation: Quat,
    /// Translation t such that `x_cam = R * x_world + t`. Meters.
    pub translation: Vec3,
}

impl CameraPose {
    /// Builds a pose, normalizing `rotation`. Rejects degenerate
    /// quaternions. Inputs already unit to within 1e-12 are stored
    /// bit-exactly so parse/write round-trips stay byte-identical.
    pub fn new(rotation: Quat, translation: Vec3) -> Result<Self> {
        let n = quat_norm(rotation);
        if !n.is_finite() || n < 1e-8 {
            return Err(Error::InvalidInput(format!(
                "degenerate quaternion with norm {n}"
            )));
        }
        let rotation = if (n - 1.0).abs() > 1e-12 {
            quat_normalize(rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_mat3(self.rotation)
    }

    /// World point to camera coordinates.
    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add3(mat3_mulv(&self.rotation_matrix(), p), self.translation)
    }

    /// Camera position in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        scale3(mat3_tmulv(&self.rotation_matrix(), self.translation), -1.0)
    }

    pub fn inverse(&self) -> Self {
        let q_inv = quat_conjugate(self.rotation);
        Self {
            rotation: q_inv,
            translation: scale3(mat3_tmulv(&self.rotation_matrix(), self.translation), -1.0),
        }
    }

    /// Composition: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: quat_normalize(quat_mul(self.rotation, other.rotation)),
            translation: add3(
                mat3_mulv(&self.rotation_matrix(), other.translation),
                self.translation,
            ),
        }
    }

    fn check_unit(&self) -> Result<()> {
        let n = quat_norm(self.rotation);
        if (n - 1.0).abs() > UNIT_QUAT_CHECK_TOL {
            return Err(Error::InvalidInput(format!(
                "quaternion norm {n} deviates from 1 beyond tolerance"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Rescales the camera for an image downscaled by an integer factor.
    pub fn downscaled(&self, factor: u32) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("downscale factor must be >= 1".into()));
        }
        let f = factor as f64;
        Self::new(
            self.fx / f,
            self.fy / f,
            self.cx / f,
            self.cy / f,
            (self.width / factor).max(1),
            (self.height / factor).max(1),
        )
    }
}

/// Weighted camera-pose distance:
/// `lambda_tr * ||t_a - t_b|| + lambda_rot * 2*acos(min(1, |<q_a, q_b>|))`.
///
/// The rotation term is the geodesic angle in radians and is invariant to
/// the sign of either quaternion.
pub fn pose_distance(
    a: &CameraPose,
    b: &CameraPose,
    lambda_tr: f64,
    lambda_rot: f64,
) -> Result<f64> {
    a.check_unit()?;
    b.check_unit()?;
    let tr = norm3(sub3(a.translation, b.translation));
    Ok(lambda_tr * tr + lambda_rot * rotation_geodesic(a.rotation, b.rotation))
}

/// Geodesic angle between two unit quaternions, sign-invariant, in radians.
pub fn rotation_geodesic(qa: Quat, qb: Quat) -> f64 {
    2.0 * quat_dot(qa, qb).abs().min(1.0).acos()
}

/// K poses strictly between `src` and `tgt`, at parameters `k / (K + 1)` for
/// `k = 1..=K`: translation linearly interpolated, rotation slerped along the
/// shorter arc. Endpoints are excluded.
pub fn interpolate_poses(src: &CameraPose, tgt: &CameraPose, k: usize) -> Result<Vec<CameraPose>> {
    if k == 0 {
        return Err(Error::InvalidInput(
            "interpolation step count K must be >= 1".into(),
        ));
    }
    src.check_unit()?;
    tgt.check_unit()?;

    let mut out = Vec::with_capacity(k);
    for step in 1..=k {
        let t = step as f64 / (k + 1) as f64;
        let translation = add3(
            scale3(src.translation, 1.0 - t),
            scale3(tgt.translation, t),
        );
        let rotation = slerp(src.rotation, tgt.rotation, t);
        out.push(CameraPose {
            rotation,
            translation,
        });
    }
    Ok(out)
}

/// Shorter-arc spherical interpolation between unit quaternions.
fn slerp(qa: Quat, mut qb: Quat, t: f64) -> Quat {
    let mut dot = quat_dot(qa, qb);
    if dot < 0.0 {
        qb = [-qb[0], -qb[1], -qb[2], -qb[3]];
        dot = -dot;
    }
    // Nearly parallel: fall back to normalized lerp.
    if dot > 1.0 - 1e-10 {
        let mut q = [0.0; 4];
        for i in 0..4 {
            q[i] = (1.0 - t) * qa[i] + t * qb[i];
        }
        return quat_normalize(q);
    }
    let theta = dot.min(1.0).acos();
    let sin_theta = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / sin_theta;
    let wb = (t * theta).sin() / sin_theta;
    let mut q = [0.0; 4];
    for i in 0..4 {
        q[i] = wa * qa[i] + wb * qb[i];
    }
    quat_normalize(q)
}

/// Outcome of projecting a world point through a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projected {
    Point { u: f64, v: f64, depth: f64 },
    /// Depth at or below the near plane; not an error.
    Behind { depth: f64 },
}

impl Projected {
    pub fn visible(&self) -> Option<(f64, f64, f64)> {
        match *self {
            Projected::Point { u, v, depth } => Some((u, v, depth)),
            Projected::Behind { .. } => None,
        }
    }
}

/// Pinhole projection of a world point: `(u, v) = (fx*x/z + cx, fy*y/z + cy)`
/// in camera coordinates, with `depth = z`.
pub fn project_point(x_world: Vec3, pose: &CameraPose, intr: &CameraIntrinsics) -> Projected {
    let p = pose.transform_point(x_world);
    let depth = p[2];
    if depth <= NEAR_PLANE {
        return Projected::Behind { depth };
    }
    Projected::Point {
        u: intr.fx * p[0] / depth + intr.cx,
        v: intr.fy * p[1] / depth + intr.cy,
        depth,
    }
}
