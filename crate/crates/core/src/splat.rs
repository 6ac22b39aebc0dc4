//! Gaussian-primitive scene representation and its serialized container.
//!
//! Container layout, little-endian: magic `SNVS`, version u32, primitive
//! count u64, background RGB as 3 f32, then one record of 14 f32 per
//! primitive in field declaration order (mean, rotation, log_scale,
//! opacity_logit, color). A JSON debug form carries the same data at full
//! precision.

use crate::error::{Error, Result};
use crate::math::{mat3_mul, mat3_transpose, quat_norm, quat_normalize, quat_to_mat3, Mat3, Quat, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCENE_MAGIC: [u8; 4] = *b"SNVS";
pub const SCENE_VERSION: u32 = 1;
/// Fields per primitive in the binary container.
pub const FIELDS_PER_PRIMITIVE: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    /// Center, meters.
    pub mean: Vec3,
    /// Unit quaternion (w, x, y, z).
    pub rotation: Quat,
    /// Per-axis log standard deviation, log meters.
    pub log_scale: Vec3,
    /// Opacity before the sigmoid.
    pub opacity_logit: f64,
    /// RGB in [0, 1].
    pub color: Vec3,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        crate::math::sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        [
            self.log_scale[0].exp(),
            self.log_scale[1].exp(),
            self.log_scale[2].exp(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if (quat_norm(self.rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "primitive rotation norm {} deviates from 1",
                quat_norm(self.rotation)
            )));
        }
        for v in self.mean.iter().chain(self.log_scale.iter()) {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite primitive parameter".into()));
            }
        }
        if !self.opacity_logit.is_finite() {
            return Err(Error::InvalidInput("non-finite opacity logit".into()));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("primitive color outside [0, 1]".into()));
        }
        if self.scale().iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidInput("primitive scale overflow".into()));
        }
        Ok(())
    }
}

/// Full covariance `R * S * S^T * R^T` with `S = diag(exp(log_scale))`.
pub fn covariance_3d(g: &GaussianPrimitive) -> Mat3 {
    let r = quat_to_mat3(g.rotation);
    let s2 = [
        (2.0 * g.log_scale[0]).exp(),
        (2.0 * g.log_scale[1]).exp(),
        (2.0 * g.log_scale[2]).exp(),
    ];
    // R * diag(s^2) * R^T
    let mut rs = r;
    for row in rs.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= s2[j];
        }
    }
    mat3_mul(&rs, &mat3_transpose(&r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    /// RGB in [0, 1], composited behind remaining transmittance.
    pub background: Vec3,
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>, background: Vec3) -> Result<Self> {
        let scene = Self {
            primitives,
            background,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput("background color outside [0, 1]".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::InvalidInput(format!("primitive {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Diagonal length of the primitive-mean bounding box. Zero for a
    /// single-point scene.
    pub fn extent(&self) -> f64 {
        if self.primitives.is_empty() {
            return 0.0;
        }
        let mut lo = self.primitives[0].mean;
        let mut hi = lo;
        for p in &self.primitives {
            for i in 0..3 {
                lo[i] = lo[i].min(p.mean[i]);
                hi[i] = hi[i].max(p.mean[i]);
            }
        }
        let d = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Serializes a scene into the binary container.
pub fn write_scene(scene: &GaussianScene) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + scene.len() * FIELDS_PER_PRIMITIVE * 4);
    out.extend_from_slice(&SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    for c in scene.background {
        out.extend_from_slice(&(c as f32).to_le_bytes());
    }
    for p in &scene.primitives {
        let fields: [f64; FIELDS_PER_PRIMITIVE] = [
            p.mean[0],
            p.mean[1],
            p.mean[2],
            p.rotation[0],
            p.rotation[1],
            p.rotation[2],
            p.rotation[3],
            p.log_scale[0],
            p.log_scale[1],
            p.log_scale[2],
            p.opacity_logit,
            p.color[0],
            p.color[1],
            p.color[2],
        ];
        for f in fields {
            out.extend_from_slice(&(f as f32).to_le_bytes());
        }
    }
    out
}

/// Parses the binary container. Rotations are renormalized after the f32
/// round-trip so primitive invariants hold exactly.
pub fn read_scene(bytes: &[u8]) -> Result<GaussianScene> {
    if bytes.len() < 20 {
        return Err(Error::parse(0, "scene container shorter than its header"));
    }
    if bytes[..4] != SCENE_MAGIC {
        return Err(Error::parse(0, "bad scene container magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SCENE_VERSION {
        return Err(Error::parse(
            4,
            format!("unsupported scene container version {version}"),
        ));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut f = F32Reader { bytes, pos: 16 };
    let background = [f.next()? as f64, f.next()? as f64, f.next()? as f64];
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0.0f64; FIELDS_PER_PRIMITIVE];
        for x in v.iter_mut() {
            *x = f.next()? as f64;
        }
        primitives.push(GaussianPrimitive {
            mean: [v[0], v[1], v[2]],
            rotation: quat_normalize([v[3], v[4], v[5], v[6]]),
            log_scale: [v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: [v[11].clamp(0.0, 1.0), v[12].clamp(0.0, 1.0), v[13].clamp(0.0, 1.0)],
        });
    }
    if f.pos != bytes.len() {
        return Err(Error::parse(
            f.pos as u64,
            "trailing bytes after last primitive record",
        ));
    }
    let scene = GaussianScene {
        primitives,
        background: [
            background[0].clamp(0.0, 1.0),
            background[1].clamp(0.0, 1.0),
            background[2].clamp(0.0, 1.0),
        ],
    };
    scene.validate()?;
    Ok(scene)
}

struct F32Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F32Reader<'_> {
    fn next(&mut self) -> Result<f32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::parse(
                self.pos as u64,
                "truncated scene container",
            ));
        }
        let v = f32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }
}

pub fn save_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    std::fs::write(path, write_scene(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read scene {}: {e}", path.display())))?;
    read_scene(&bytes)
}

/// Full-precision JSON debug form.
pub fn scene_to_json(scene: &GaussianScene) -> String {
    serde_json::to_string_pretty(scene).expect("scene serialization cannot fail")
}

pub fn scene_from_json(text: &str) -> Result<GaussianScene> {
    let scene: GaussianScene = serde_json::from_str(text)
        .map_err(|e| Error::Load(format!("invalid scene JSON: {e}")))?;
    scene.validate()?;
    Ok(scene)
}
