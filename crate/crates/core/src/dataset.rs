//! Dataset manifest and loading: posed source frames with optional masks,
//! pose-only target views, and the initialization point cloud.

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::colmap::{self, PointCloud};
use crate::error::{Error, Result};
use crate::image::{read_image, read_mask, ImageBuffer, PixelMask};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Manifest document: `{ "sources": [...], "targets": [...], "colmap_dir": path }`.
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub sources: Vec<ManifestSource>,
    pub targets: Vec<ManifestTarget>,
    pub colmap_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSource {
    pub image: PathBuf,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    pub image_id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTarget {
    pub pose: PoseJson,
    pub camera_id: u32,
}

/// JSON form of a world-to-camera pose.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseJson {
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl PoseJson {
    pub fn to_pose(self) -> Result<CameraPose> {
        CameraPose::new([self.qw, self.qx, self.qy, self.qz], [self.tx, self.ty, self.tz])
    }

    pub fn from_pose(p: &CameraPose) -> Self {
        Self {
            qw: p.rotation[0],
            qx: p.rotation[1],
            qy: p.rotation[2],
            qz: p.rotation[3],
            tx: p.translation[0],
            ty: p.translation[1],
            tz: p.translation[2],
        }
    }
}

/// A posed source frame. Frames loaded without a mask carry an all-false one.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFrame {
    pub image: ImageBuffer,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub mask: PixelMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetView {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

/// Validated scene: N source frames, M pose-only target views, and the
/// point cloud used for initialization.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub source_frames: Vec<SourceFrame>,
    pub target_views: Vec<TargetView>,
    pub point_cloud: PointCloud,
}

impl SceneDataset {
    pub fn new(
        source_frames: Vec<SourceFrame>,
        target_views: Vec<TargetView>,
        point_cloud: PointCloud,
    ) -> Result<Self> {
        if source_frames.is_empty() {
            return Err(Error::InvalidInput(
                "dataset needs at least one source frame".into(),
            ));
        }
        for (i, f) in source_frames.iter().enumerate() {
            if f.image.width() != f.intrinsics.width || f.image.height() != f.intrinsics.height {
                return Err(Error::Load(format!(
                    "source {i}: image is {}x{} but intrinsics say {}x{}",
                    f.image.width(),
                    f.image.height(),
                    f.intrinsics.width,
                    f.intrinsics.height
                )));
            }
            if !f.mask.matches_dimensions(&f.image) {
                return Err(Error::Load(format!(
                    "source {i}: mask is {}x{} but image is {}x{}",
                    f.mask.width(),
                    f.mask.height(),
                    f.image.width(),
                    f.image.height()
                )));
            }
        }
        Ok(Self {
            source_frames,
            target_views,
            point_cloud,
        })
    }

    /// Number of source frames.
    pub fn num_sources(&self) -> usize {
        self.source_frames.len()
    }

    /// Number of target views.
    pub fn num_targets(&self) -> usize {
        self.target_views.len()
    }

    /// Downscales every frame, mask and camera by an integer factor.
    /// Images use block averaging; a mask block is masked if any of its
    /// pixels is.
    pub fn downscaled(&self, factor: u32) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidInput("downscale factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let source_frames = self
            .source_frames
            .iter()
            .map(|f| -> Result<SourceFrame> {
                Ok(SourceFrame {
                    image: downscale_image(&f.image, factor)?,
                    pose: f.pose,
                    intrinsics: f.intrinsics.downscaled(factor)?,
                    mask: downscale_mask(&f.mask, factor)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let target_views = self
            .target_views
            .iter()
            .map(|t| -> Result<TargetView> {
                Ok(TargetView {
                    pose: t.pose,
                    intrinsics: t.intrinsics.downscaled(factor)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneDataset::new(source_frames, target_views, self.point_cloud.clone())
    }
}

fn downscale_image(img: &ImageBuffer, factor: u32) -> Result<ImageBuffer> {
    let w = (img.width() / factor).max(1);
    let h = (img.height() / factor).max(1);
    let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
    let n = (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = img.pixel(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            for c in acc {
                pixels.push((c / n).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(w, h, pixels)
}

fn downscale_mask(mask: &PixelMask, factor: u32) -> Result<PixelMask> {
    let w = (mask.width() / factor).max(1);
    let h = (mask.height() / factor).max(1);
    let mut bits = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h {
        for x in 0..w {
            let mut any = false;
            for dy in 0..factor {
                for dx in 0..factor {
                    any |= mask.is_masked(x * factor + dx, y * factor + dy);
                }
            }
            bits.push(any);
        }
    }
    PixelMask::new(w, h, bits)
}

/// Reads and fully validates a dataset from a manifest file.
pub fn load_dataset(manifest_path: &Path) -> Result<SceneDataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        Error::Load(format!("cannot read manifest {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("invalid manifest JSON: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_dataset_from_manifest(&manifest, base)
}

pub fn load_dataset_from_manifest(manifest: &Manifest, base: &Path) -> Result<SceneDataset> {
    let colmap_dir = resolve(base, &manifest.colmap_dir);
    let recon = colmap::load_reconstruction(&colmap_dir)?;

    let mut source_frames = Vec::with_capacity(manifest.sources.len());
    for src in &manifest.sources {
        let rec = recon.images.get(&src.image_id).ok_or_else(|| {
            Error::Load(format!(
                "manifest references image id {} not present in the reconstruction",
                src.image_id
            ))
        })?;
        let intr = *recon.cameras.get(&rec.camera_id).ok_or_else(|| {
            Error::Load(format!(
                "image id {} references camera id {} not present in the reconstruction",
                src.image_id, rec.camera_id
            ))
        })?;
        let img_path = resolve(base, &src.image);
        let image = read_image(&img_path)?;
        let mask = match &src.mask {
            Some(m) => read_mask(&resolve(base, m))?,
            None => PixelMask::all_clear(image.width(), image.height()),
        };
        source_frames.push(SourceFrame {
            image,
            pose: rec.pose,
            intrinsics: intr,
            mask,
        });
    }

    let mut target_views = Vec::with_capacity(manifest.targets.len());
    for tgt in &manifest.targets {
        let intr = *recon.cameras.get(&tgt.camera_id).ok_or_else(|| {
            Error::Load(format!(
                "target references camera id {} not present in the reconstruction",
                tgt.camera_id
            ))
        })?;
        target_views.push(TargetView {
            pose: tgt.pose.to_pose()?,
            intrinsics: intr,
        });
    }

    SceneDataset::new(source_frames, target_views, recon.points)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
