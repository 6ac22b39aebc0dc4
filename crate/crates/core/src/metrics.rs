//! Image-quality metrics (PSNR, SSIM with masked variants), the aggregate
//! challenge score, and the metrics report format.

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, PixelMask};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// PSNR value reported for identical images; also the normalization ceiling
/// of the aggregate score.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window parameters: 11x11 Gaussian, sigma 1.5, K1/K2 per the original
/// definition, dynamic range 1.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak-signal-to-noise ratio in dB over unmasked pixels, peak 1.0, capped
/// at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&PixelMask>) -> Result<f64> {
    check_dims(a, b, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask.is_some_and(|m| m.is_masked(x, y)) {
                continue;
            }
            let pa = a.pixel(x, y);
            let pb = b.pixel(x, y);
            for ch in 0..3 {
                let d = pa[ch] - pb[ch];
                sum += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("all pixels masked".into()));
    }
    let mse = sum / (count * 3) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 11x11 Gaussian window, separable 1D weights.
fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

struct SsimWindows<'a> {
    a: &'a ImageBuffer,
    b: &'a ImageBuffer,
    kernel: [f64; SSIM_WINDOW],
    /// Valid window centers: the full window fits in the image and contains
    /// no masked pixel.
    centers: Vec<(u32, u32)>,
}

impl<'a> SsimWindows<'a> {
    fn build(a: &'a ImageBuffer, b: &'a ImageBuffer, mask: Option<&PixelMask>) -> Result<Self> {
        check_dims(a, b, mask)?;
        if a.width().min(a.height()) < SSIM_WINDOW as u32 {
            return Err(Error::InvalidInput(format!(
                "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
                a.width(),
                a.height()
            )));
        }
        let half = (SSIM_WINDOW / 2) as u32;
        let mut centers = Vec::new();
        for cy in half..a.height() - half {
            'center: for cx in half..a.width() - half {
                if let Some(m) = mask {
                    for wy in cy - half..=cy + half {
                        for wx in cx - half..=cx + half {
                            if m.is_masked(wx, wy) {
                                continue 'center;
                            }
                        }
                    }
                }
                centers.push((cx, cy));
            }
        }
        if centers.is_empty() {
            return Err(Error::UndefinedMetric(
                "no valid SSIM window (every window touches a masked pixel)".into(),
            ));
        }
        Ok(Self {
            a,
            b,
            kernel: ssim_kernel(),
            centers,
        })
    }

    /// Weighted window statistics for one channel at one center.
    fn stats(&self, cx: u32, cy: u32, ch: usize) -> WindowStats {
        let half = (SSIM_WINDOW / 2) as i64;
        let mut mu_a = 0.0;
        let mut mu_b = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        let mut ab = 0.0;
        for wy in 0..SSIM_WINDOW {
            for wx in 0..SSIM_WINDOW {
                let w = self.kernel[wy] * self.kernel[wx];
                let x = (cx as i64 + wx as i64 - half) as u32;
                let y = (cy as i64 + wy as i64 - half) as u32;
                let va = self.a.pixel(x, y)[ch];
                let vb = self.b.pixel(x, y)[ch];
                mu_a += w * va;
                mu_b += w * vb;
                aa += w * va * va;
                bb += w * vb * vb;
                ab += w * va * vb;
            }
        }
        WindowStats {
            mu_a,
            mu_b,
            var_a: aa - mu_a * mu_a,
            var_b: bb - mu_b * mu_b,
            cov: ab - mu_a * mu_b,
        }
    }
}

struct WindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

impl WindowStats {
    fn ssim(&self) -> f64 {
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let a1 = 2.0 * self.mu_a * self.mu_b + c1;
        let a2 = 2.0 * self.cov + c2;
        let b1 = self.mu_a * self.mu_a + self.mu_b * self.mu_b + c1;
        let b2 = self.var_a + self.var_b + c2;
        (a1 * a2) / (b1 * b2)
    }
}

/// Structural similarity over valid window centers, per channel then
/// averaged. Windows containing any masked pixel are excluded entirely.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&PixelMask>) -> Result<f64> {
    let windows = SsimWindows::build(a, b, mask)?;
    let mut total = 0.0;
    for &(cx, cy) in &windows.centers {
        for ch in 0..3 {
            total += windows.stats(cx, cy, ch).ssim();
        }
    }
    Ok(total / (windows.centers.len() * 3) as f64)
}

/// SSIM plus its gradient with respect to the first image, laid out like the
/// image's pixel buffer. Used by the photometric loss.
pub(crate) fn ssim_and_grad(
    a: &ImageBuffer,
    b: &ImageBuffer,
    mask: Option<&PixelMask>,
) -> Result<(f64, Vec<f64>)> {
    let windows = SsimWindows::build(a, b, mask)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let half = (SSIM_WINDOW / 2) as i64;
    let norm = 1.0 / (windows.centers.len() * 3) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.pixels().len()];
    let width = a.width() as usize;
    for &(cx, cy) in &windows.centers {
        for ch in 0..3 {
            let s = windows.stats(cx, cy, ch);
            let a1 = 2.0 * s.mu_a * s.mu_b + c1;
            let a2 = 2.0 * s.cov + c2;
            let b1 = s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1;
            let b2 = s.var_a + s.var_b + c2;
            let value = (a1 * a2) / (b1 * b2);
            total += value;
            // d(ssim_w)/d(a_i) = 2 w_i / (B1 B2) *
            //   [ mu_b A2 + (b_i - mu_b) A1 - value (mu_a B2 + (a_i - mu_a) B1) ]
            let scale = 2.0 / (b1 * b2) * norm;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let w = windows.kernel[wy] * windows.kernel[wx];
                    let x = (cx as i64 + wx as i64 - half) as usize;
                    let y = (cy as i64 + wy as i64 - half) as usize;
                    let va = a.pixels()[(y * width + x) * 3 + ch];
                    let vb = b.pixels()[(y * width + x) * 3 + ch];
                    grad[(y * width + x) * 3 + ch] += w
                        * scale
                        * (s.mu_b * a2 + (vb - s.mu_b) * a1
                            - value * (s.mu_a * b2 + (va - s.mu_a) * b1));
                }
            }
        }
    }
    Ok((total * norm, grad))
}

/// Aggregate challenge score `0.4 * PSNR/100 + 0.3 * SSIM + 0.3 * (1 - LPIPS)`.
pub fn challenge_score(psnr_db: f64, ssim_value: f64, lpips: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lpips) {
        return Err(Error::InvalidInput(format!("LPIPS {lpips} outside [0, 1]")));
    }
    if !(-1.0..=1.0).contains(&ssim_value) {
        return Err(Error::InvalidInput(format!(
            "SSIM {ssim_value} outside [-1, 1]"
        )));
    }
    Ok(0.4 * psnr_db / 100.0 + 0.3 * ssim_value + 0.3 * (1.0 - lpips))
}

/// Validates an externally supplied LPIPS value map (frame id -> scalar in
/// [0, 1]). Frames without an entry simply end up with no score.
pub fn lpips_ingest(values: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    for (frame, &v) in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!(
                "LPIPS value {v} for frame {frame:?} outside [0, 1]"
            )));
        }
    }
    Ok(values.clone())
}

/// Per-frame metric record; `score` is present exactly when `lpips` is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl MetricsRecord {
    pub fn new(psnr: f64, ssim: f64, lpips: Option<f64>) -> Result<Self> {
        let score = match lpips {
            Some(l) => Some(challenge_score(psnr, ssim, l)?),
            None => None,
        };
        Ok(Self {
            psnr,
            ssim,
            lpips,
            score,
        })
    }
}

/// Full report: one record per frame plus the aggregate (arithmetic mean per
/// metric, score recomputed from the means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: Vec<FrameMetrics>,
    pub aggregate: MetricsRecord,
    pub metadata: ReportMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub name: String,
    #[serde(flatten)]
    pub record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// SSIM is averaged over RGB channels rather than computed on luma.
    pub ssim_channel_mode: String,
    pub psnr_cap_db: f64,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            ssim_channel_mode: "per-channel-average".into(),
            psnr_cap_db: PSNR_CAP_DB,
        }
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&PixelMask>) -> Result<()> {
    if !a.same_dimensions(b) {
        return Err(Error::InvalidInput(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if let Some(m) = mask {
        if !m.matches_dimensions(a) {
            return Err(Error::InvalidInput("mask dimensions differ from image".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gradient_image(w: u32, h: u32, phase: f64) -> ImageBuffer {
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.4 * ((x as f64 * 0.37 + y as f64 * 0.61 + phase).sin());
                px.extend_from_slice(&[v, (v * 0.8).min(1.0), (v * 1.1).min(1.0)]);
            }
        }
        ImageBuffer::new(w, h, px).unwrap()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = gradient_image(16, 16, 0.0);
        assert_eq!(psnr(&a, &a, None).unwrap(), 100.0);
    }

    #[test]
    fn psnr_uniform_offset_closed_form() {
        let a = ImageBuffer::filled(16, 16, [0.4, 0.4, 0.4]).unwrap();
        let b = ImageBuffer::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(psnr(&a, &b, None).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_ignores_masked_corruption() {
        let a = gradient_image(16, 16, 0.0);
        let mut b = a.clone();
        let mut mask = PixelMask::all_clear(16, 16);
        for y in 0..8 {
            for x in 0..16 {
                mask.set(x, y, true);
            }
        }
        b.set_pixel(3, 2, [1.0, 0.0, 1.0]);
        assert_eq!(psnr(&a, &b, Some(&mask)).unwrap(), 100.0);
    }

    #[test]
    fn psnr_all_masked_is_undefined() {
        let a = gradient_image(12, 12, 0.0);
        let mut mask = PixelMask::all_clear(12, 12);
        for y in 0..12 {
            for x in 0..12 {
                mask.set(x, y, true);
            }
        }
        assert!(matches!(
            psnr(&a, &a, Some(&mask)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let a = gradient_image(16, 16, 0.0);
        assert_eq!(ssim(&a, &a, None).unwrap(), 1.0);
    }

    #[test]
    fn ssim_symmetric() {
        let a = gradient_image(16, 16, 0.0);
        let b = gradient_image(16, 16, 1.7);
        let s1 = ssim(&a, &b, None).unwrap();
        let s2 = ssim(&b, &a, None).unwrap();
        assert_abs_diff_eq!(s1, s2, epsilon = 1e-12);
        assert!(s1 < 1.0);
    }

    #[test]
    fn ssim_constant_pair_closed_form() {
        let a = ImageBuffer::filled(16, 16, [0.3, 0.3, 0.3]).unwrap();
        let b = ImageBuffer::filled(16, 16, [0.5, 0.5, 0.5]).unwrap();
        // Constant windows: variances and covariance vanish, so
        // ssim = (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1).
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * 0.3 * 0.5 + c1) / (0.3 * 0.3 + 0.5 * 0.5 + c1);
        assert_abs_diff_eq!(ssim(&a, &b, None).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = gradient_image(8, 8, 0.0);
        assert!(ssim(&a, &a, None).is_err());
    }

    #[test]
    fn ssim_grad_matches_finite_differences() {
        let a = gradient_image(16, 16, 0.0);
        let b = gradient_image(16, 16, 2.3);
        let (_, grad) = ssim_and_grad(&a, &b, None).unwrap();
        let h = 1e-6;
        for &idx in &[0usize, 100, 300, 500, 737] {
            let mut ap = a.pixels().to_vec();
            ap[idx] += h;
            let fp = ssim(&ImageBuffer::new(16, 16, ap.clone()).unwrap(), &b, None).unwrap();
            ap[idx] -= 2.0 * h;
            let fm = ssim(&ImageBuffer::new(16, 16, ap).unwrap(), &b, None).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert_abs_diff_eq!(grad[idx], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn challenge_score_paper_rows() {
        assert!((challenge_score(21.03, 0.695, 0.326).unwrap() - 0.495).abs() < 5e-4);
        assert!((challenge_score(23.19, 0.769, 0.231).unwrap() - 0.554).abs() < 5e-4);
        assert_abs_diff_eq!(challenge_score(100.0, 1.0, 0.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn challenge_score_affine_coefficients() {
        let base = challenge_score(20.0, 0.5, 0.5).unwrap();
        assert_abs_diff_eq!(
            challenge_score(21.0, 0.5, 0.5).unwrap() - base,
            0.004,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            challenge_score(20.0, 0.6, 0.5).unwrap() - base,
            0.03,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            challenge_score(20.0, 0.5, 0.6).unwrap() - base,
            -0.03,
            epsilon = 1e-12
        );
    }

    #[test]
    fn lpips_validation() {
        let mut m = BTreeMap::new();
        m.insert("f0".to_string(), 0.0);
        assert!(lpips_ingest(&m).is_ok());
        m.insert("f1".to_string(), 1.2);
        match lpips_ingest(&m) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("f1")),
            other => panic!("expected invalid-input, got {other:?}"),
        }
    }

    #[test]
    fn record_score_present_iff_lpips() {
        let r = MetricsRecord::new(50.0, 0.9, None).unwrap();
        assert!(r.score.is_none());
        let r = MetricsRecord::new(50.0, 0.9, Some(0.0)).unwrap();
        assert_abs_diff_eq!(r.score.unwrap(), 0.2 + 0.27 + 0.3, epsilon = 1e-12);
    }
}
