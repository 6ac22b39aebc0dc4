//! Forward rendering of a Gaussian scene: EWA-style projection to 2D,
//! front-to-back alpha compositing, deterministic regardless of primitive
//! storage order or thread count.
//!
//! Pixel (x, y) is sampled at (x + 0.5, y + 0.5) in the continuous pixel
//! coordinates produced by projection.

use crate::camera::{CameraIntrinsics, CameraPose, NEAR_PLANE};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::math::{mat3_mulv, Mat2, Vec2, Vec3};
use crate::splat::{covariance_3d, GaussianPrimitive, GaussianScene};
use rayon::prelude::*;

/// Per-splat alpha is clamped to this maximum.
pub const ALPHA_MAX: f64 = 0.99;
/// Added to the projected covariance diagonal, in px^2.
pub const COV2D_DILATION: f64 = 0.3;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Projected covariances with a determinant below this are skipped.
pub const SINGULAR_DET_EPS: f64 = 1e-12;
/// Chi-square (2 dof) quantile bounding 99% of a 2D Gaussian's mass; the
/// cull test checks this ellipse against the image rectangle.
pub const CULL_CHI2: f64 = 9.21034037197618;
/// Per-pixel evaluation support: exponents above this contribute nothing
/// (about 6.3 sigma; the dropped tail is below 3e-9 of the peak, small
/// enough that finite differences of the loss never see the cutoff).
const SUPPORT_EXPONENT: f64 = 20.0;

/// A primitive projected into a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    pub mean2d: Vec2,
    /// Dilated 2D covariance.
    pub cov2d: Mat2,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection2d {
    Visible(SplatProjection),
    Culled(CullReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CullReason {
    /// Depth at or below the near plane.
    Behind,
    /// The 99%-mass ellipse misses the image rectangle.
    OffImage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub culled_behind: usize,
    pub culled_off_image: usize,
    pub skipped_singular: usize,
}

/// Projects one Gaussian: camera-space mean through the pose, 2D covariance
/// `J W Sigma W^T J^T` with the perspective Jacobian at the mean, plus
/// dilation on the diagonal.
pub fn project_gaussian(
    g: &GaussianPrimitive,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Projection2d {
    let w = pose.rotation_matrix();
    let cam = pose.transform_point(g.mean);
    project_gaussian_inner(g, &w, cam, intr)
}

fn project_gaussian_inner(
    g: &GaussianPrimitive,
    w: &crate::math::Mat3,
    cam: Vec3,
    intr: &CameraIntrinsics,
) -> Projection2d {
    let z = cam[2];
    if z <= NEAR_PLANE {
        return Projection2d::Culled(CullReason::Behind);
    }
    let (x, y) = (cam[0], cam[1]);
    let mean2d = [intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy];

    // M = J * W, rows of the perspective Jacobian at the mean.
    let j0 = [intr.fx / z, 0.0, -intr.fx * x / (z * z)];
    let j1 = [0.0, intr.fy / z, -intr.fy * y / (z * z)];
    let m0 = [
        j0[0] * w[0][0] + j0[2] * w[2][0],
        j0[0] * w[0][1] + j0[2] * w[2][1],
        j0[0] * w[0][2] + j0[2] * w[2][2],
    ];
    let m1 = [
        j1[1] * w[1][0] + j1[2] * w[2][0],
        j1[1] * w[1][1] + j1[2] * w[2][1],
        j1[1] * w[1][2] + j1[2] * w[2][2],
    ];
    let sigma = covariance_3d(g);
    let s_m0 = mat3_mulv(&sigma, m0);
    let s_m1 = mat3_mulv(&sigma, m1);
    let a = m0[0] * s_m0[0] + m0[1] * s_m0[1] + m0[2] * s_m0[2] + COV2D_DILATION;
    let b = m0[0] * s_m1[0] + m0[1] * s_m1[1] + m0[2] * s_m1[2];
    let c = m1[0] * s_m1[0] + m1[1] * s_m1[1] + m1[2] * s_m1[2] + COV2D_DILATION;

    // 99%-mass ellipse against the image rectangle [0, W] x [0, H].
    let rx = (CULL_CHI2 * a).max(0.0).sqrt();
    let ry = (CULL_CHI2 * c).max(0.0).sqrt();
    if mean2d[0] + rx < 0.0
        || mean2d[0] - rx > intr.width as f64
        || mean2d[1] + ry < 0.0
        || mean2d[1] - ry > intr.height as f64
    {
        return Projection2d::Culled(CullReason::OffImage);
    }

    Projection2d::Visible(SplatProjection {
        mean2d,
        cov2d: [[a, b], [b, c]],
        depth: z,
    })
}

/// A splat ready for per-pixel evaluation, in composited (front-to-back)
/// order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedSplat {
    /// Index into the scene's primitive list.
    pub prim: usize,
    pub mean2d: Vec2,
    /// Inverse covariance entries (a, b, c).
    pub conic: (f64, f64, f64),
    /// Camera-space mean; needed by the backward pass.
    pub cam: Vec3,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
    /// Inclusive pixel-index bounds of the evaluation support.
    pub x0: u32,
    pub x1: u32,
    pub y0: u32,
    pub y1: u32,
}

impl PreparedSplat {
    fn covers(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// Sort-stable total order: depth first, then the primitive's own bytes, so
/// the composited order never depends on storage order.
fn order_key(p: &GaussianPrimitive, depth: f64) -> [u64; 15] {
    fn key(v: f64) -> u64 {
        let bits = v.to_bits();
        if bits >> 63 == 1 {
            !bits
        } else {
            bits | (1 << 63)
        }
    }
    [
        key(depth),
        key(p.mean[0]),
        key(p.mean[1]),
        key(p.mean[2]),
        key(p.rotation[0]),
        key(p.rotation[1]),
        key(p.rotation[2]),
        key(p.rotation[3]),
        key(p.log_scale[0]),
        key(p.log_scale[1]),
        key(p.log_scale[2]),
        key(p.opacity_logit),
        key(p.color[0]),
        key(p.color[1]),
        key(p.color[2]),
    ]
}

pub(crate) fn prepare_splats(
    scene: &GaussianScene,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Result<(Vec<PreparedSplat>, RenderDiagnostics)> {
    if scene.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty scene".into()));
    }
    let w = pose.rotation_matrix();
    let mut diags = RenderDiagnostics::default();
    let mut splats = Vec::with_capacity(scene.len());
    for (i, g) in scene.primitives.iter().enumerate() {
        let cam = pose.transform_point(g.mean);
        match project_gaussian_inner(g, &w, cam, intr) {
            Projection2d::Culled(CullReason::Behind) => diags.culled_behind += 1,
            Projection2d::Culled(CullReason::OffImage) => diags.culled_off_image += 1,
            Projection2d::Visible(p) => {
                let (a, b, c) = (p.cov2d[0][0], p.cov2d[0][1], p.cov2d[1][1]);
                let det = a * c - b * b;
                if !det.is_finite() || det < SINGULAR_DET_EPS {
                    diags.skipped_singular += 1;
                    continue;
                }
                let conic = (c / det, -b / det, a / det);
                // Support rectangle in pixel indices; sample points are at
                // half-integers.
                let rx = (2.0 * SUPPORT_EXPONENT * a).sqrt();
                let ry = (2.0 * SUPPORT_EXPONENT * c).sqrt();
                let x0 = (p.mean2d[0] - rx - 0.5).ceil().max(0.0) as u32;
                let x1 = (p.mean2d[0] + rx - 0.5).floor().min(intr.width as f64 - 1.0);
                let y0 = (p.mean2d[1] - ry - 0.5).ceil().max(0.0) as u32;
                let y1 = (p.mean2d[1] + ry - 0.5).floor().min(intr.height as f64 - 1.0);
                if x1 < 0.0 || y1 < 0.0 {
                    continue;
                }
                splats.push(PreparedSplat {
                    prim: i,
                    mean2d: p.mean2d,
                    conic,
                    cam,
                    depth: p.depth,
                    opacity: g.opacity(),
                    color: g.color,
                    x0,
                    x1: x1 as u32,
                    y0,
                    y1: y1 as u32,
                });
            }
        }
    }
    splats.sort_by(|l, r| {
        order_key(&scene.primitives[l.prim], l.depth)
            .cmp(&order_key(&scene.primitives[r.prim], r.depth))
    });
    Ok((splats, diags))
}

/// One contribution at a pixel, recorded for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelEntry {
    /// Index into the prepared-splat list.
    pub splat: usize,
    pub alpha: f64,
    /// Whether the alpha clamp was active (gradient stops through alpha).
    pub clamped: bool,
    /// Transmittance before this contribution.
    pub t_before: f64,
}

/// Walks splats front-to-back at pixel (x, y). Returns the accumulated
/// pre-background color and the final transmittance; optionally records
/// each contribution.
pub(crate) fn composite_pixel(
    splats: &[PreparedSplat],
    x: u32,
    y: u32,
    mut record: Option<&mut Vec<PixelEntry>>,
) -> (Vec3, f64) {
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    let mut color = [0.0; 3];
    let mut t = 1.0;
    for (si, s) in splats.iter().enumerate() {
        if !s.covers(x, y) {
            continue;
        }
        let dx = px - s.mean2d[0];
        let dy = py - s.mean2d[1];
        let e = 0.5 * (s.conic.0 * dx * dx + 2.0 * s.conic.1 * dx * dy + s.conic.2 * dy * dy);
        if e > SUPPORT_EXPONENT {
            continue;
        }
        let raw = s.opacity * (-e).exp();
        let clamped = raw > ALPHA_MAX;
        let alpha = if clamped { ALPHA_MAX } else { raw };
        if let Some(rec) = record.as_deref_mut() {
            rec.push(PixelEntry {
                splat: si,
                alpha,
                clamped,
                t_before: t,
            });
        }
        for ch in 0..3 {
            color[ch] += s.color[ch] * alpha * t;
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    (color, t)
}

/// Renders the scene to an image. Per pixel, primitives composite
/// front-to-back by mean depth; remaining transmittance multiplies the
/// background color.
pub fn render(
    scene: &GaussianScene,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Result<ImageBuffer> {
    render_with_diagnostics(scene, pose, intr).map(|(img, _)| img)
}

pub fn render_with_diagnostics(
    scene: &GaussianScene,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
) -> Result<(ImageBuffer, RenderDiagnostics)> {
    let (splats, diags) = prepare_splats(scene, pose, intr)?;
    Ok((
        forward_image(&splats, scene.background, intr.width, intr.height)?,
        diags,
    ))
}

/// Composites every pixel from prepared splats; shared by `render` and the
/// backward pass so both see the identical forward image.
pub(crate) fn forward_image(
    splats: &[PreparedSplat],
    background: Vec3,
    width: u32,
    height: u32,
) -> Result<ImageBuffer> {
    let rows: Vec<Vec<f64>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(width as usize * 3);
            for x in 0..width {
                let (acc, t) = composite_pixel(splats, x, y, None);
                for ch in 0..3 {
                    row.push((acc[ch] + t * background[ch]).clamp(0.0, 1.0));
                }
            }
            row
        })
        .collect();
    let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
    for row in rows {
        pixels.extend_from_slice(&row);
    }
    ImageBuffer::new(width, height, pixels)
}
