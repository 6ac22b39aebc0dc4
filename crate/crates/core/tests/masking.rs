//! Masking law: values strictly inside masked regions can never influence
//! any masked operation. All comparisons are exact.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatnvs::camera::{CameraIntrinsics, CameraPose};
use splatnvs::colmap::PointCloud;
use splatnvs::dataset::{SceneDataset, SourceFrame, TargetView};
use splatnvs::fit::{fit, init_from_pointcloud, photometric_loss, FitConfig};
use splatnvs::image::{ImageBuffer, PixelMask};
use splatnvs::metrics::{psnr, ssim};

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> ImageBuffer {
    let px = (0..(w * h * 3) as usize).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageBuffer::new(w, h, px).unwrap()
}

/// Corner mask, leaving valid SSIM windows elsewhere.
fn corner_mask(w: u32, h: u32) -> PixelMask {
    let mut mask = PixelMask::all_clear(w, h);
    for y in 0..h / 4 {
        for x in 0..w / 4 {
            mask.set(x, y, true);
        }
    }
    mask
}

fn corrupt_masked(img: &ImageBuffer, mask: &PixelMask, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.is_masked(x, y) {
                out.set_pixel(
                    x,
                    y,
                    [
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..1.0),
                    ],
                );
            }
        }
    }
    out
}

#[test]
fn masked_metrics_and_loss_ignore_masked_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let a = random_image(&mut rng, 24, 24);
    let b = random_image(&mut rng, 24, 24);
    let mask = corner_mask(24, 24);
    let b2 = corrupt_masked(&b, &mask, &mut rng);
    let a2 = corrupt_masked(&a, &mask, &mut rng);

    assert_eq!(
        psnr(&a, &b, Some(&mask)).unwrap(),
        psnr(&a2, &b2, Some(&mask)).unwrap()
    );
    assert_eq!(
        ssim(&a, &b, Some(&mask)).unwrap(),
        ssim(&a2, &b2, Some(&mask)).unwrap()
    );
    assert_eq!(
        photometric_loss(&a, &b, &mask, 0.2).unwrap(),
        photometric_loss(&a2, &b2, &mask, 0.2).unwrap()
    );
}

#[test]
fn fit_is_invariant_to_masked_groundtruth() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let intr = CameraIntrinsics::new(24.0, 24.0, 12.0, 12.0, 24, 24).unwrap();
    let pc = PointCloud::new(
        (0..15)
            .map(|k| {
                [
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                    3.0 + 0.15 * k as f64,
                ]
            })
            .collect(),
        (0..15)
            .map(|_| {
                [
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                ]
            })
            .collect(),
        None,
    )
    .unwrap();

    let make_dataset = |gt_images: Vec<ImageBuffer>, mask: &PixelMask| {
        let frames = gt_images
            .into_iter()
            .enumerate()
            .map(|(i, image)| SourceFrame {
                image,
                pose: CameraPose::new([1.0, 0.0, 0.0, 0.0], [0.2 * i as f64, 0.0, 0.0]).unwrap(),
                intrinsics: intr,
                mask: mask.clone(),
            })
            .collect();
        SceneDataset::new(
            frames,
            vec![TargetView {
                pose: CameraPose::identity(),
                intrinsics: intr,
            }],
            pc.clone(),
        )
        .unwrap()
    };

    let mask = corner_mask(24, 24);
    let gt: Vec<ImageBuffer> = (0..2).map(|_| random_image(&mut rng, 24, 24)).collect();
    let corrupted: Vec<ImageBuffer> = gt
        .iter()
        .map(|img| corrupt_masked(img, &mask, &mut rng))
        .collect();

    let config = FitConfig {
        iterations: 20,
        seed: 5,
        ..FitConfig::default()
    };
    let ds1 = make_dataset(gt, &mask);
    let ds2 = make_dataset(corrupted, &mask);
    let init = init_from_pointcloud(&pc, &config).unwrap();
    let out1 = fit(&ds1, &init, &config).unwrap();
    let out2 = fit(&ds2, &init, &config).unwrap();
    assert_eq!(out1.loss_history, out2.loss_history);
    assert_eq!(out1.scene, out2.scene);
}
