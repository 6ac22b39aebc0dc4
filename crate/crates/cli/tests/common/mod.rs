//! Shared on-disk fixtures for CLI and acceptance tests: a small synthetic
//! scene written out as a COLMAP reconstruction, source PNGs, a dataset
//! manifest, and ground-truth target renders.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatnvs::camera::{CameraIntrinsics, CameraPose};
use splatnvs::colmap::{
    write_cameras_bin, write_images_bin, write_points3d_bin, ImageRecord, PointCloud,
};
use splatnvs::dataset::PoseJson;
use splatnvs::image::write_image;
use splatnvs::math::{norm3, quat_from_mat3, quat_normalize, scale3, sub3, Mat3};
use splatnvs::render::render;
use splatnvs::splat::{GaussianPrimitive, GaussianScene};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: u32 = 48;

/// World-to-camera pose looking from `eye` toward `at`.
pub fn look_at(eye: [f64; 3], at: [f64; 3]) -> CameraPose {
    let f = {
        let d = sub3(at, eye);
        scale3(d, 1.0 / norm3(d))
    };
    let up = [0.0, 1.0, 0.0];
    let right = {
        let r = [
            up[1] * f[2] - up[2] * f[1],
            up[2] * f[0] - up[0] * f[2],
            up[0] * f[1] - up[1] * f[0],
        ];
        scale3(r, 1.0 / norm3(r))
    };
    let down = [
        f[1] * right[2] - f[2] * right[1],
        f[2] * right[0] - f[0] * right[2],
        f[0] * right[1] - f[1] * right[0],
    ];
    let rot: Mat3 = [right, down, f];
    let t = scale3(
        [
            rot[0][0] * eye[0] + rot[0][1] * eye[1] + rot[0][2] * eye[2],
            rot[1][0] * eye[0] + rot[1][1] * eye[1] + rot[1][2] * eye[2],
            rot[2][0] * eye[0] + rot[2][1] * eye[1] + rot[2][2] * eye[2],
        ],
        -1.0,
    );
    CameraPose::new(quat_from_mat3(&rot), t).unwrap()
}

pub fn arc_pose(theta_deg: f64) -> CameraPose {
    let th = theta_deg.to_radians();
    let eye = [5.0 * th.sin(), 0.0, 5.0 - 5.0 * th.cos()];
    look_at(eye, [0.0, 0.0, 5.0])
}

pub fn test_intrinsics() -> CameraIntrinsics {
    let s = IMAGE_SIZE as f64;
    CameraIntrinsics::new(s, s, s / 2.0, s / 2.0, IMAGE_SIZE, IMAGE_SIZE).unwrap()
}

pub fn ground_truth_scene(seed: u64, n: usize) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let primitives = (0..n)
        .map(|_| GaussianPrimitive {
            mean: [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(4.0..6.0),
            ],
            rotation: quat_normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            log_scale: [
                rng.gen_range(0.18f64.ln()..0.4f64.ln()),
                rng.gen_range(0.18f64.ln()..0.4f64.ln()),
                rng.gen_range(0.18f64.ln()..0.4f64.ln()),
            ],
            opacity_logit: rng.gen_range(1.0..3.0),
            color: [
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
            ],
        })
        .collect();
    GaussianScene {
        primitives,
        background: [0.0; 3],
    }
}

#[allow(dead_code)] // each test target uses a different subset
pub struct Fixture {
    pub manifest_path: PathBuf,
    pub gt_scene: GaussianScene,
    pub target_poses: Vec<CameraPose>,
    /// Ground-truth renders of the target poses, written under gt/.
    pub gt_dir: PathBuf,
}

/// Writes a complete dataset under `root`: COLMAP files, source frames on
/// an arc, `num_targets` held-out views, and their ground-truth renders.
pub fn write_dataset(root: &Path, seed: u64, num_sources: usize, num_targets: usize) -> Fixture {
    let gt_scene = ground_truth_scene(seed, 60);
    let intr = test_intrinsics();
    let colmap_dir = root.join("sparse");
    std::fs::create_dir_all(&colmap_dir).unwrap();

    let mut cams = BTreeMap::new();
    cams.insert(1u32, intr);
    std::fs::write(colmap_dir.join("cameras.bin"), write_cameras_bin(&cams)).unwrap();

    let mut images = BTreeMap::new();
    let mut source_entries = Vec::new();
    for i in 0..num_sources {
        let theta = -20.0 + 40.0 * i as f64 / (num_sources.max(2) - 1) as f64;
        let pose = arc_pose(theta);
        let name = format!("source_{i}.png");
        write_image(&root.join(&name), &render(&gt_scene, &pose, &intr).unwrap()).unwrap();
        images.insert(
            i as u32 + 1,
            ImageRecord {
                pose,
                camera_id: 1,
                name: name.clone(),
            },
        );
        source_entries.push(format!(
            "{{ \"image\": \"{name}\", \"mask\": null, \"image_id\": {} }}",
            i + 1
        ));
    }
    std::fs::write(colmap_dir.join("images.bin"), write_images_bin(&images)).unwrap();

    // Point cloud: perturbed ground-truth means.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 101);
    let sigma = 0.05 * gt_scene.extent();
    let pc = PointCloud::new(
        gt_scene
            .primitives
            .iter()
            .map(|p| {
                [
                    p.mean[0] + rng.gen_range(-sigma..sigma),
                    p.mean[1] + rng.gen_range(-sigma..sigma),
                    p.mean[2] + rng.gen_range(-sigma..sigma),
                ]
            })
            .collect(),
        gt_scene
            .primitives
            .iter()
            .map(|p| {
                [
                    (p.color[0] * 255.0).round() / 255.0,
                    (p.color[1] * 255.0).round() / 255.0,
                    (p.color[2] * 255.0).round() / 255.0,
                ]
            })
            .collect(),
        None,
    )
    .unwrap();
    std::fs::write(colmap_dir.join("points3D.bin"), write_points3d_bin(&pc)).unwrap();

    let gt_dir = root.join("gt");
    std::fs::create_dir_all(&gt_dir).unwrap();
    let mut target_entries = Vec::new();
    let mut target_poses = Vec::new();
    for j in 0..num_targets {
        let pose = arc_pose(2.5 + 5.0 * j as f64);
        let p = PoseJson::from_pose(&pose);
        target_entries.push(format!(
            "{{ \"pose\": {{ \"qw\": {}, \"qx\": {}, \"qy\": {}, \"qz\": {}, \"tx\": {}, \"ty\": {}, \"tz\": {} }}, \"camera_id\": 1 }}",
            p.qw, p.qx, p.qy, p.qz, p.tx, p.ty, p.tz
        ));
        write_image(
            &gt_dir.join(format!("target_{j}.png")),
            &render(&gt_scene, &pose, &intr).unwrap(),
        )
        .unwrap();
        target_poses.push(pose);
    }

    let manifest = format!(
        "{{\n  \"sources\": [{}],\n  \"targets\": [{}],\n  \"colmap_dir\": \"sparse\"\n}}\n",
        source_entries.join(", "),
        target_entries.join(", ")
    );
    let manifest_path = root.join("manifest.json");
    std::fs::write(&manifest_path, manifest).unwrap();
    Fixture {
        manifest_path,
        gt_scene,
        target_poses,
        gt_dir,
    }
}

pub fn splatnvs_bin() -> &'static str {
    env!("CARGO_BIN_EXE_splatnvs")
}

/// Runs the binary, returning (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(splatnvs_bin())
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
