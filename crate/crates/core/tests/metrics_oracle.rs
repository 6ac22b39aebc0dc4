//! Metric checks against independent implementations: a direct-summation
//! SSIM written from the definition (no shared code with the library path)
//! and closed-form PSNR cases.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatnvs::image::{ImageBuffer, PixelMask};
use splatnvs::metrics::{psnr, ssim};

/// Direct-summation SSIM: per window center, per channel, every term
/// evaluated with explicit loops and freshly normalized weights.
fn ssim_direct(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&PixelMask>) -> Option<f64> {
    const WIN: i64 = 11;
    const HALF: i64 = 5;
    const SIGMA: f64 = 1.5;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;

    let w = a.width() as i64;
    let h = a.height() as i64;
    let mut weights = vec![0.0; (WIN * WIN) as usize];
    let mut wsum = 0.0;
    for dy in -HALF..=HALF {
        for dx in -HALF..=HALF {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA * SIGMA)).exp();
            weights[((dy + HALF) * WIN + dx + HALF) as usize] = v;
            wsum += v;
        }
    }
    for v in &mut weights {
        *v /= wsum;
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for cy in HALF..h - HALF {
        'center: for cx in HALF..w - HALF {
            if let Some(m) = mask {
                for dy in -HALF..=HALF {
                    for dx in -HALF..=HALF {
                        if m.is_masked((cx + dx) as u32, (cy + dy) as u32) {
                            continue 'center;
                        }
                    }
                }
            }
            for ch in 0..3 {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for dy in -HALF..=HALF {
                    for dx in -HALF..=HALF {
                        let wgt = weights[((dy + HALF) * WIN + dx + HALF) as usize];
                        mu_a += wgt * a.pixel((cx + dx) as u32, (cy + dy) as u32)[ch];
                        mu_b += wgt * b.pixel((cx + dx) as u32, (cy + dy) as u32)[ch];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for dy in -HALF..=HALF {
                    for dx in -HALF..=HALF {
                        let wgt = weights[((dy + HALF) * WIN + dx + HALF) as usize];
                        let va = a.pixel((cx + dx) as u32, (cy + dy) as u32)[ch] - mu_a;
                        let vb = b.pixel((cx + dx) as u32, (cy + dy) as u32)[ch] - mu_b;
                        var_a += wgt * va * va;
                        var_b += wgt * vb * vb;
                        cov += wgt * va * vb;
                    }
                }
                total += ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> ImageBuffer {
    let px = (0..(w * h * 3) as usize).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageBuffer::new(w, h, px).unwrap()
}

#[test]
fn ssim_matches_direct_summation_on_50_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for case in 0..50 {
        let w = rng.gen_range(12..24);
        let h = rng.gen_range(12..24);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let got = ssim(&a, &b, None).unwrap();
        let want = ssim_direct(&a, &b, None).unwrap();
        assert!(
            (got - want).abs() < 1e-6,
            "case {case}: ssim {got} vs direct {want}"
        );
    }
}

#[test]
fn masked_ssim_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    for _ in 0..10 {
        let a = random_image(&mut rng, 20, 20);
        let b = random_image(&mut rng, 20, 20);
        let mut mask = PixelMask::all_clear(20, 20);
        for _ in 0..12 {
            mask.set(rng.gen_range(0..20), rng.gen_range(0..20), true);
        }
        let got = ssim(&a, &b, Some(&mask));
        let want = ssim_direct(&a, &b, Some(&mask));
        match (got, want) {
            (Ok(g), Some(w)) => assert!((g - w).abs() < 1e-6, "{g} vs {w}"),
            (Err(_), None) => {}
            (g, w) => panic!("disagreement on validity: {g:?} vs {w:?}"),
        }
    }
}

#[test]
fn ssim_of_negative_image_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let a = random_image(&mut rng, 16, 16);
    let neg_px: Vec<f64> = a.pixels().iter().map(|v| 1.0 - v).collect();
    let b = ImageBuffer::new(16, 16, neg_px).unwrap();
    let got = ssim(&a, &b, None).unwrap();
    let want = ssim_direct(&a, &b, None).unwrap();
    assert!((got - want).abs() < 1e-6);
    assert!(got < 1.0);
}

#[test]
fn psnr_closed_forms() {
    let a = ImageBuffer::filled(16, 16, [0.25; 3]).unwrap();
    for offset in [0.05, 0.1, 0.2, 0.4] {
        let b = ImageBuffer::filled(16, 16, [0.25 + offset; 3]).unwrap();
        let expected = 10.0 * (1.0 / (offset * offset)).log10();
        let got = psnr(&a, &b, None).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn psnr_strictly_decreases_with_noise_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    let base = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
    let noise: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut prev = f64::INFINITY;
    for amp in [0.02, 0.05, 0.1, 0.2, 0.3, 0.4] {
        let px: Vec<f64> = base
            .pixels()
            .iter()
            .zip(noise.iter())
            .map(|(v, n)| v + amp * n)
            .collect();
        let img = ImageBuffer::new(16, 16, px).unwrap();
        let p = psnr(&img, &base, None).unwrap();
        assert!(p < prev, "psnr {p} did not decrease (prev {prev}) at amplitude {amp}");
        prev = p;
    }
}

#[test]
fn psnr_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(306);
    let a = random_image(&mut rng, 16, 16);
    let b = random_image(&mut rng, 16, 16);
    assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
    let sa = ssim(&a, &b, None).unwrap();
    let sb = ssim(&b, &a, None).unwrap();
    assert!((sa - sb).abs() < 1e-12);
}
