//! Gradient-based fitting of a Gaussian scene to posed source images:
//! point-cloud initialization, masked photometric loss, analytic backward
//! pass through compositing and projection, adaptive optimization, and
//! densification.

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::colmap::PointCloud;
use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, PixelMask};
use crate::math::{logit, mat3_mulv, mat3_tmulv, quat_normalize, quat_to_mat3, Mat3, Vec3};
use crate::metrics::ssim_and_grad;
use crate::render::{forward_image, prepare_splats, composite_pixel, PixelEntry, PreparedSplat};
use crate::splat::{covariance_3d, GaussianPrimitive, GaussianScene};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Adam moment coefficients and epsilon.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Densification schedule and thresholds.
pub const DENSIFY_INTERVAL: u32 = 100;
pub const DENSIFY_START: u32 = 500;
pub const DENSIFY_GRAD_THRESHOLD: f64 = 2e-4;
pub const PRUNE_OPACITY: f64 = 0.005;
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
pub const SPLIT_EXTENT_FRACTION: f64 = 0.01;
const GRAD_EMA_DECAY: f64 = 0.9;

/// Initialization constants: starting opacity and the isotropic-scale
/// fallback when a point has no neighbors.
pub const INIT_OPACITY: f64 = 0.1;
pub const INIT_SCALE_FALLBACK_M: f64 = 0.1;
const INIT_SCALE_CLAMP: (f64, f64) = (1e-4, 10.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Optimization steps; 0 returns the initialization unchanged.
    pub iterations: u32,
    /// Weight of the (1 - SSIM) term against L1, in [0, 1].
    pub lambda_ssim: f64,
    /// Per-group learning rates. The means rate is multiplied by the scene
    /// extent at fit time.
    pub lr_means: f64,
    pub lr_rotations: f64,
    pub lr_log_scales: f64,
    pub lr_opacity_logits: f64,
    pub lr_colors: f64,
    pub densify: bool,
    pub seed: u64,
    /// Background color given to scenes built by `init_from_pointcloud`.
    pub background: [f64; 3],
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lambda_ssim: 0.2,
            lr_means: 1.6e-4,
            lr_rotations: 1e-3,
            lr_log_scales: 5e-3,
            lr_opacity_logits: 5e-2,
            lr_colors: 2.5e-3,
            densify: false,
            seed: 0,
            background: [0.0; 3],
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::InvalidInput(format!(
                "lambda_ssim {} outside [0, 1]",
                self.lambda_ssim
            )));
        }
        for (name, lr) in [
            ("lr_means", self.lr_means),
            ("lr_rotations", self.lr_rotations),
            ("lr_log_scales", self.lr_log_scales),
            ("lr_opacity_logits", self.lr_opacity_logits),
            ("lr_colors", self.lr_colors),
        ] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("background color outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized config, recorded in checkpoint sidecars.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(json.as_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

/// Per-primitive partials for every primitive field, aligned with scene
/// order. Culled primitives keep zero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub d_mean: Vec<[f64; 3]>,
    pub d_rotation: Vec<[f64; 4]>,
    pub d_log_scale: Vec<[f64; 3]>,
    pub d_opacity_logit: Vec<f64>,
    pub d_color: Vec<[f64; 3]>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![[0.0; 3]; n],
            d_rotation: vec![[0.0; 4]; n],
            d_log_scale: vec![[0.0; 3]; n],
            d_opacity_logit: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_mean.is_empty()
    }

    /// Errors with the index of the first primitive holding a non-finite
    /// partial.
    pub fn check_finite(&self) -> Result<()> {
        for i in 0..self.len() {
            let finite = self.d_mean[i].iter().all(|v| v.is_finite())
                && self.d_rotation[i].iter().all(|v| v.is_finite())
                && self.d_log_scale[i].iter().all(|v| v.is_finite())
                && self.d_opacity_logit[i].is_finite()
                && self.d_color[i].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for primitive {i}"
                )));
            }
        }
        Ok(())
    }
}

/// One Gaussian per point: position and color from the cloud, opacity 0.1,
/// identity rotation, isotropic scale set to the mean distance to the three
/// nearest neighbors (clamped to [1e-4, 10] m; 0.1 m when no neighbors).
pub fn init_from_pointcloud(pc: &PointCloud, config: &FitConfig) -> Result<GaussianScene> {
    if pc.is_empty() {
        return Err(Error::InvalidInput(
            "cannot initialize from an empty point cloud".into(),
        ));
    }
    let nn = mean_knn_distances(&pc.positions, 3);
    let primitives = pc
        .positions
        .iter()
        .zip(pc.colors.iter())
        .zip(nn.iter())
        .map(|((&mean, &color), &dist)| {
            let scale = match dist {
                Some(d) => d.clamp(INIT_SCALE_CLAMP.0, INIT_SCALE_CLAMP.1),
                None => INIT_SCALE_FALLBACK_M,
            };
            GaussianPrimitive {
                mean,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [scale.ln(); 3],
                opacity_logit: logit(INIT_OPACITY),
                color,
            }
        })
        .collect();
    GaussianScene::new(primitives, config.background)
}

/// Brute-force mean k-nearest-neighbor distance per point; `None` when a
/// point has no neighbors at all.
fn mean_knn_distances(points: &[[f64; 3]], k: usize) -> Vec<Option<f64>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            debug_assert!(k <= best.len());
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                let d = d2.sqrt();
                if d < best[k - 1] {
                    best[k - 1] = d;
                    let mut m = k - 1;
                    while m > 0 && best[m] < best[m - 1] {
                        best.swap(m, m - 1);
                        m -= 1;
                    }
                }
            }
            let avail: Vec<f64> = best.iter().copied().filter(|d| d.is_finite()).collect();
            if avail.is_empty() {
                None
            } else {
                Some(avail.iter().sum::<f64>() / avail.len() as f64)
            }
        })
        .collect()
}

/// Masked photometric loss `(1 - lambda) * L1 + lambda * (1 - SSIM)`.
/// Masked pixels contribute nothing; the L1 mean renormalizes by the
/// unmasked count and SSIM drops windows touching any masked pixel.
pub fn photometric_loss(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &PixelMask,
    lambda_ssim: f64,
) -> Result<f64> {
    photometric_loss_impl(pred, gt, mask, lambda_ssim, false).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to `pred`, laid out like the pixel
/// buffer.
pub(crate) fn photometric_loss_and_grad(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &PixelMask,
    lambda_ssim: f64,
) -> Result<(f64, Vec<f64>)> {
    photometric_loss_impl(pred, gt, mask, lambda_ssim, true)
        .map(|(l, g)| (l, g.expect("grad requested")))
}

fn photometric_loss_impl(
    pred: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &PixelMask,
    lambda_ssim: f64,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if !pred.same_dimensions(gt) {
        return Err(Error::InvalidInput(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if !mask.matches_dimensions(pred) {
        return Err(Error::InvalidInput("mask dimensions differ from image".into()));
    }
    if !(0.0..=1.0).contains(&lambda_ssim) {
        return Err(Error::InvalidInput(format!(
            "lambda_ssim {lambda_ssim} outside [0, 1]"
        )));
    }
    let unmasked = pred.pixels().len() / 3 - mask.count_masked();
    if unmasked == 0 {
        return Err(Error::UndefinedMetric(
            "undefined loss: all pixels masked".into(),
        ));
    }

    let width = pred.width() as usize;
    let mut l1 = 0.0;
    let mut grad = if with_grad {
        Some(vec![0.0; pred.pixels().len()])
    } else {
        None
    };
    let l1_norm = 1.0 / (unmasked * 3) as f64;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if mask.is_masked(x, y) {
                continue;
            }
            let base = (y as usize * width + x as usize) * 3;
            for ch in 0..3 {
                let d = pred.pixels()[base + ch] - gt.pixels()[base + ch];
                l1 += d.abs();
                if let Some(g) = grad.as_deref_mut() {
                    g[base + ch] = (1.0 - lambda_ssim) * d.signum() * l1_norm;
                }
            }
        }
    }
    l1 *= l1_norm;

    if lambda_ssim == 0.0 {
        return Ok(((1.0 - lambda_ssim) * l1, grad));
    }
    let mask_opt = if mask.count_masked() > 0 { Some(mask) } else { None };
    let (ssim_value, ssim_grad) = if with_grad {
        ssim_and_grad(pred, gt, mask_opt)?
    } else {
        (crate::metrics::ssim(pred, gt, mask_opt)?, Vec::new())
    };
    if let Some(g) = grad.as_deref_mut() {
        for (gi, si) in g.iter_mut().zip(ssim_grad.iter()) {
            *gi -= lambda_ssim * si;
        }
    }
    Ok(((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim_value), grad))
}

/// Per-splat accumulators gathered during the pixel pass:
/// d_mean2d (2), d_cov2d as the symmetric full-matrix gradient (a, b, c),
/// d_color (3), d_opacity (w.r.t. the sigmoid output).
const ACC_LEN: usize = 9;

/// Analytic gradients of the photometric loss with respect to every
/// primitive parameter. Depth order is treated as constant; clamped alphas
/// and culled primitives pass no gradient.
pub fn backward(
    scene: &GaussianScene,
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    gt: &ImageBuffer,
    mask: &PixelMask,
    lambda_ssim: f64,
) -> Result<(f64, GradientBuffer)> {
    let (splats, _) = prepare_splats(scene, pose, intr)?;
    let pred = forward_image(&splats, scene.background, intr.width, intr.height)?;
    let (loss, d_image) = photometric_loss_and_grad(&pred, gt, mask, lambda_ssim)?;

    // Pixel pass: fixed row bands, each with its own accumulator, reduced
    // in band order so results are independent of thread count.
    let height = intr.height;
    let bands: u32 = 16.min(height);
    let rows_per_band = height.div_ceil(bands);
    let band_accs: Vec<Vec<f64>> = (0..bands)
        .into_par_iter()
        .map(|band| {
            let mut acc = vec![0.0; splats.len() * ACC_LEN];
            let mut entries: Vec<PixelEntry> = Vec::new();
            let y_end = ((band + 1) * rows_per_band).min(height);
            for y in band * rows_per_band..y_end {
                for x in 0..intr.width {
                    backward_pixel(&splats, scene.background, &d_image, x, y, intr.width, &mut entries, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut acc = vec![0.0; splats.len() * ACC_LEN];
    for band in band_accs {
        for (a, b) in acc.iter_mut().zip(band.iter()) {
            *a += b;
        }
    }

    // Chain 2D gradients into primitive parameters, one splat per primitive.
    let w = pose.rotation_matrix();
    let per_splat: Vec<(usize, SplatGrads)> = splats
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let a = &acc[si * ACC_LEN..(si + 1) * ACC_LEN];
            (s.prim, chain_splat(&scene.primitives[s.prim], s, &w, intr, a))
        })
        .collect();
    let mut grads = GradientBuffer::zeros(scene.len());
    for (prim, g) in per_splat {
        grads.d_mean[prim] = g.d_mean;
        grads.d_rotation[prim] = g.d_rotation;
        grads.d_log_scale[prim] = g.d_log_scale;
        grads.d_opacity_logit[prim] = g.d_opacity_logit;
        grads.d_color[prim] = g.d_color;
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel(
    splats: &[PreparedSplat],
    background: Vec3,
    d_image: &[f64],
    x: u32,
    y: u32,
    width: u32,
    entries: &mut Vec<PixelEntry>,
    acc: &mut [f64],
) {
    let base = (y as usize * width as usize + x as usize) * 3;
    let dpix = [d_image[base], d_image[base + 1], d_image[base + 2]];
    if dpix == [0.0; 3] {
        return;
    }
    entries.clear();
    let (_, t_final) = composite_pixel(splats, x, y, Some(entries));
    if entries.is_empty() {
        return;
    }
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    // Suffix sum: contributions behind the current entry plus background.
    let mut suffix = [
        t_final * background[0],
        t_final * background[1],
        t_final * background[2],
    ];
    for entry in entries.iter().rev() {
        let s = &splats[entry.splat];
        let slot = &mut acc[entry.splat * ACC_LEN..(entry.splat + 1) * ACC_LEN];
        let weight = entry.alpha * entry.t_before;
        let mut d_alpha = 0.0;
        for ch in 0..3 {
            slot[5 + ch] += dpix[ch] * weight; // d_color
            d_alpha += dpix[ch] * (s.color[ch] * entry.t_before - suffix[ch] / (1.0 - entry.alpha));
            suffix[ch] += s.color[ch] * weight;
        }
        if entry.clamped {
            continue;
        }
        let dx = px - s.mean2d[0];
        let dy = py - s.mean2d[1];
        let e = 0.5 * (s.conic.0 * dx * dx + 2.0 * s.conic.1 * dx * dy + s.conic.2 * dy * dy);
        let g = (-e).exp();
        slot[8] += d_alpha * g; // d_opacity (sigmoid output)
        let d_e = -g * (d_alpha * s.opacity);
        let vx = s.conic.0 * dx + s.conic.1 * dy;
        let vy = s.conic.1 * dx + s.conic.2 * dy;
        slot[0] += -d_e * vx; // d_mean2d
        slot[1] += -d_e * vy;
        slot[2] += -0.5 * d_e * vx * vx; // d_cov2d, full-matrix convention
        slot[3] += -0.5 * d_e * vx * vy;
        slot[4] += -0.5 * d_e * vy * vy;
    }
}

struct SplatGrads {
    d_mean: [f64; 3],
    d_rotation: [f64; 4],
    d_log_scale: [f64; 3],
    d_opacity_logit: f64,
    d_color: [f64; 3],
}

/// Chains accumulated 2D gradients through projection, covariance
/// construction, the quaternion normalization, sigmoid and exp.
fn chain_splat(
    prim: &GaussianPrimitive,
    s: &PreparedSplat,
    w: &Mat3,
    intr: &CameraIntrinsics,
    acc: &[f64],
) -> SplatGrads {
    let (gm2x, gm2y) = (acc[0], acc[1]);
    let (ga, gb, gc) = (acc[2], acc[3], acc[4]);
    let d_color = [acc[5], acc[6], acc[7]];
    let d_opacity = acc[8];

    let [x, y, z] = s.cam;
    let (fx, fy) = (intr.fx, intr.fy);

    // Recompute M = J * W at the camera-space mean.
    let j0 = [fx / z, 0.0, -fx * x / (z * z)];
    let j1 = [0.0, fy / z, -fy * y / (z * z)];
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
    let sigma = covariance_3d(prim);

    // d_sigma = M^T dCov2d M, symmetric since dCov2d is.
    let mut d_sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_sigma[i][j] = ga * m0[i] * m0[j]
                + gb * (m0[i] * m1[j] + m1[i] * m0[j])
                + gc * m1[i] * m1[j];
        }
    }

    // dM = 2 dCov2d M Sigma (dCov2d symmetric, Sigma symmetric).
    let sm0 = mat3_mulv(&sigma, m0);
    let sm1 = mat3_mulv(&sigma, m1);
    let mut dm0 = [0.0; 3];
    let mut dm1 = [0.0; 3];
    for j in 0..3 {
        dm0[j] = 2.0 * (ga * sm0[j] + gb * sm1[j]);
        dm1[j] = 2.0 * (gb * sm0[j] + gc * sm1[j]);
    }
    // dJ = dM W^T; row r of dJ is W * dm_r.
    let dj0 = mat3_mulv(w, dm0);
    let dj1 = mat3_mulv(w, dm1);

    // Gradient w.r.t. the camera-space mean through J and the projection.
    let z2 = z * z;
    let mut d_cam = [0.0; 3];
    d_cam[0] += dj0[2] * (-fx / z2);
    d_cam[1] += dj1[2] * (-fy / z2);
    d_cam[2] += dj0[0] * (-fx / z2)
        + dj1[1] * (-fy / z2)
        + dj0[2] * (2.0 * fx * x / (z2 * z))
        + dj1[2] * (2.0 * fy * y / (z2 * z));
    d_cam[0] += gm2x * fx / z;
    d_cam[1] += gm2y * fy / z;
    d_cam[2] += -gm2x * fx * x / z2 - gm2y * fy * y / z2;
    let d_mean = mat3_tmulv(w, d_cam);

    // Sigma = R D R^T with D = diag(exp(2 log_scale)).
    let q = quat_normalize(prim.rotation);
    let r = quat_to_mat3(q);
    let d2 = [
        (2.0 * prim.log_scale[0]).exp(),
        (2.0 * prim.log_scale[1]).exp(),
        (2.0 * prim.log_scale[2]).exp(),
    ];
    // dR = 2 d_sigma R D.
    let mut dr = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut v = 0.0;
            for k in 0..3 {
                v += d_sigma[i][k] * r[k][j];
            }
            dr[i][j] = 2.0 * v * d2[j];
        }
    }
    // d log_scale: (R^T d_sigma R)_ii * 2 exp(2 ls_i).
    let mut d_log_scale = [0.0; 3];
    for i in 0..3 {
        let mut v = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                v += r[a][i] * d_sigma[a][b] * r[b][i];
            }
        }
        d_log_scale[i] = 2.0 * d2[i] * v;
    }

    // Contract dR with dR/dq for the unit quaternion, then project through
    // the normalization (stored quaternions are unit).
    let [qw, qx, qy, qz] = q;
    let dr_dq = [
        // dR/dw
        [
            [0.0, -2.0 * qz, 2.0 * qy],
            [2.0 * qz, 0.0, -2.0 * qx],
            [-2.0 * qy, 2.0 * qx, 0.0],
        ],
        // dR/dx
        [
            [0.0, 2.0 * qy, 2.0 * qz],
            [2.0 * qy, -4.0 * qx, -2.0 * qw],
            [2.0 * qz, 2.0 * qw, -4.0 * qx],
        ],
        // dR/dy
        [
            [-4.0 * qy, 2.0 * qx, 2.0 * qw],
            [2.0 * qx, 0.0, 2.0 * qz],
            [-2.0 * qw, 2.0 * qz, -4.0 * qy],
        ],
        // dR/dz
        [
            [-4.0 * qz, -2.0 * qw, 2.0 * qx],
            [2.0 * qw, -4.0 * qz, 2.0 * qy],
            [2.0 * qx, 2.0 * qy, 0.0],
        ],
    ];
    let mut d_qhat = [0.0; 4];
    for (k, table) in dr_dq.iter().enumerate() {
        let mut v = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                v += dr[i][j] * table[i][j];
            }
        }
        d_qhat[k] = v;
    }
    let dot = q[0] * d_qhat[0] + q[1] * d_qhat[1] + q[2] * d_qhat[2] + q[3] * d_qhat[3];
    let d_rotation = [
        d_qhat[0] - q[0] * dot,
        d_qhat[1] - q[1] * dot,
        d_qhat[2] - q[2] * dot,
        d_qhat[3] - q[3] * dot,
    ];

    let op = s.opacity;
    SplatGrads {
        d_mean,
        d_rotation,
        d_log_scale,
        d_opacity_logit: d_opacity * op * (1.0 - op),
        d_color,
    }
}

/// Adam state for one parameter group.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u32) {
        debug_assert_eq!(params.len(), self.m.len());
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    /// Remaps state after densification: kept primitives carry their
    /// moments, new ones start at zero.
    fn remap(&mut self, parents: &[Option<usize>], stride: usize) {
        let mut m = vec![0.0; parents.len() * stride];
        let mut v = vec![0.0; parents.len() * stride];
        for (new_idx, parent) in parents.iter().enumerate() {
            if let Some(old_idx) = parent {
                for k in 0..stride {
                    m[new_idx * stride + k] = self.m[old_idx * stride + k];
                    v[new_idx * stride + k] = self.v[old_idx * stride + k];
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

/// The fitted scene plus its per-step training losses.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub scene: GaussianScene,
    pub loss_history: Vec<f64>,
}

/// Runs `config.iterations` optimization steps. Each step samples one
/// source frame (seeded round-robin: a fresh shuffled order every pass over
/// the frames), computes the backward pass, and applies per-group Adam
/// updates; rotations are renormalized after each step. Returns the scene
/// snapshot with the lowest trailing-window mean loss (window = number of
/// frames), or the final iterate for runs shorter than one window.
pub fn fit(dataset: &SceneDataset, init: &GaussianScene, config: &FitConfig) -> Result<FitOutput> {
    config.validate()?;
    init.validate()?;
    let frames = &dataset.source_frames;
    let n_frames = frames.len();

    let mut scene = init.clone();
    let extent = init.extent().max(1e-6);
    let lr_means = config.lr_means * extent;

    let n = scene.len();
    let mut opt_means = AdamState::new(n * 3);
    let mut opt_rot = AdamState::new(n * 4);
    let mut opt_scale = AdamState::new(n * 3);
    let mut opt_opacity = AdamState::new(n);
    let mut opt_color = AdamState::new(n * 3);
    let mut grad_ema = vec![0.0; n];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_frames).collect();

    let mut history = Vec::with_capacity(config.iterations as usize);
    let window = n_frames;
    let mut best_mean = f64::INFINITY;
    let mut best_scene: Option<GaussianScene> = None;

    for t in 0..config.iterations {
        let pos = t as usize % n_frames;
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let frame = &frames[order[pos]];
        let (loss, grads) = backward(
            &scene,
            &frame.pose,
            &frame.intrinsics,
            &frame.image,
            &frame.mask,
            config.lambda_ssim,
        )
        .map_err(|e| match e {
            Error::Numerical(msg) => Error::Numerical(format!("iteration {t}: {msg}")),
            other => other,
        })?;
        history.push(loss);

        let step = t + 1;
        step_group3(
            &mut scene.primitives,
            &mut opt_means,
            &grads.d_mean,
            lr_means,
            step,
            |p| &mut p.mean,
        );
        step_group3(
            &mut scene.primitives,
            &mut opt_scale,
            &grads.d_log_scale,
            config.lr_log_scales,
            step,
            |p| &mut p.log_scale,
        );
        {
            let mut rot: Vec<f64> = Vec::with_capacity(scene.len() * 4);
            for p in &scene.primitives {
                rot.extend_from_slice(&p.rotation);
            }
            let grad: Vec<f64> = grads.d_rotation.iter().flatten().copied().collect();
            opt_rot.step(&mut rot, &grad, config.lr_rotations, step);
            for (i, p) in scene.primitives.iter_mut().enumerate() {
                p.rotation = [rot[i * 4], rot[i * 4 + 1], rot[i * 4 + 2], rot[i * 4 + 3]];
            }
        }
        {
            let mut logits: Vec<f64> = scene.primitives.iter().map(|p| p.opacity_logit).collect();
            opt_opacity.step(&mut logits, &grads.d_opacity_logit, config.lr_opacity_logits, step);
            for (p, l) in scene.primitives.iter_mut().zip(logits) {
                p.opacity_logit = l;
            }
        }
        {
            let mut colors: Vec<f64> = Vec::with_capacity(scene.len() * 3);
            for p in &scene.primitives {
                colors.extend_from_slice(&p.color);
            }
            let grad: Vec<f64> = grads.d_color.iter().flatten().copied().collect();
            opt_color.step(&mut colors, &grad, config.lr_colors, step);
            for (i, p) in scene.primitives.iter_mut().enumerate() {
                for c in 0..3 {
                    p.color[c] = colors[i * 3 + c].clamp(0.0, 1.0);
                }
            }
        }
        for p in &mut scene.primitives {
            renormalize_guarded(&mut p.rotation);
        }

        if config.densify {
            for (e, g) in grad_ema.iter_mut().zip(grads.d_mean.iter()) {
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                *e = GRAD_EMA_DECAY * *e + (1.0 - GRAD_EMA_DECAY) * norm;
            }
            if step >= DENSIFY_START
                && step <= config.iterations / 2
                && step % DENSIFY_INTERVAL == 0
            {
                let (new_scene, parents) = densify_and_prune_with_parents(&scene, &grad_ema, config)?;
                scene = new_scene;
                opt_means.remap(&parents, 3);
                opt_rot.remap(&parents, 4);
                opt_scale.remap(&parents, 3);
                opt_opacity.remap(&parents, 1);
                opt_color.remap(&parents, 3);
                grad_ema = vec![0.0; scene.len()];
            }
        }

        if history.len() >= window {
            let mean = history[history.len() - window..].iter().sum::<f64>() / window as f64;
            if mean < best_mean {
                best_mean = mean;
                best_scene = Some(scene.clone());
            }
        }
    }

    Ok(FitOutput {
        scene: best_scene.unwrap_or(scene),
        loss_history: history,
    })
}

fn renormalize_guarded(q: &mut [f64; 4]) {
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    if (n2 - 1.0).abs() > 1e-12 {
        *q = quat_normalize(*q);
    }
}

/// One Adam step over a 3-vector field of every primitive.
fn step_group3(
    prims: &mut [GaussianPrimitive],
    opt: &mut AdamState,
    grads: &[[f64; 3]],
    lr: f64,
    step: u32,
    field: impl Fn(&mut GaussianPrimitive) -> &mut [f64; 3],
) {
    let mut params: Vec<f64> = Vec::with_capacity(prims.len() * 3);
    for p in prims.iter_mut() {
        params.extend_from_slice(field(p));
    }
    let grad: Vec<f64> = grads.iter().flatten().copied().collect();
    opt.step(&mut params, &grad, lr, step);
    for (i, p) in prims.iter_mut().enumerate() {
        *field(p) = [params[i * 3], params[i * 3 + 1], params[i * 3 + 2]];
    }
}

/// Densification: primitives whose positional-gradient EMA exceeds the
/// threshold are cloned (small) or split into two children mirrored about
/// the parent mean with scales divided by 1.6 (large, relative to
/// 0.01 * scene extent); primitives with opacity below 0.005 are pruned.
pub fn densify_and_prune(
    scene: &GaussianScene,
    grads_ema: &[f64],
    config: &FitConfig,
) -> Result<GaussianScene> {
    densify_and_prune_with_parents(scene, grads_ema, config).map(|(s, _)| s)
}

pub(crate) fn densify_and_prune_with_parents(
    scene: &GaussianScene,
    grads_ema: &[f64],
    _config: &FitConfig,
) -> Result<(GaussianScene, Vec<Option<usize>>)> {
    if grads_ema.len() != scene.len() {
        return Err(Error::InvalidInput(format!(
            "gradient EMA has {} entries for {} primitives",
            grads_ema.len(),
            scene.len()
        )));
    }
    let split_threshold = SPLIT_EXTENT_FRACTION * scene.extent();
    let mut primitives = Vec::with_capacity(scene.len());
    let mut parents = Vec::with_capacity(scene.len());
    for (i, p) in scene.primitives.iter().enumerate() {
        if p.opacity() < PRUNE_OPACITY {
            continue;
        }
        if grads_ema[i] > DENSIFY_GRAD_THRESHOLD {
            let scale = p.scale();
            let (axis_idx, &max_scale) = scale
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("3 axes");
            if max_scale > split_threshold {
                // Split: two children mirrored about the parent mean along
                // the principal axis, scales divided by 1.6.
                let r = quat_to_mat3(p.rotation);
                let axis = [r[0][axis_idx], r[1][axis_idx], r[2][axis_idx]];
                let offset = 0.5 * max_scale;
                let child_scale = [
                    p.log_scale[0] - SPLIT_SCALE_DIVISOR.ln(),
                    p.log_scale[1] - SPLIT_SCALE_DIVISOR.ln(),
                    p.log_scale[2] - SPLIT_SCALE_DIVISOR.ln(),
                ];
                for sign in [-1.0, 1.0] {
                    primitives.push(GaussianPrimitive {
                        mean: [
                            p.mean[0] + sign * offset * axis[0],
                            p.mean[1] + sign * offset * axis[1],
                            p.mean[2] + sign * offset * axis[2],
                        ],
                        log_scale: child_scale,
                        ..*p
                    });
                    parents.push(None);
                }
            } else {
                // Clone: keep the parent and add an identical copy.
                primitives.push(*p);
                parents.push(Some(i));
                primitives.push(*p);
                parents.push(None);
            }
        } else {
            primitives.push(*p);
            parents.push(Some(i));
        }
    }
    Ok((
        GaussianScene {
            primitives,
            background: scene.background,
        },
        parents,
    ))
}
