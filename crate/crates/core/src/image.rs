//! Float RGB image buffers, boolean dynamic-object masks, and 8-bit
//! PNG / PPM (P6) file I/O.
//!
//! Pixel values live in `[0, 1]`; files store 8-bit channels. Decoding maps
//! `v -> v / 255`, encoding rounds to nearest and clamps, so one write/read
//! cycle quantizes and every later cycle is lossless.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Row-major H x W x 3 image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::InvalidInput(format!(
                "pixel buffer has {} values, expected {expected}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Constant-color image.
    pub fn filled(width: u32, height: u32, rgb: [f64; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            pixels.extend_from_slice(&rgb);
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = self.index(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let i = self.index(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn same_dimensions(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit quantization: round to nearest, clamp to `[0, 255]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(width: u32, height: u32, data: &[u8]) -> Result<Self> {
        let pixels = data.iter().map(|&v| v as f64 / 255.0).collect();
        Self::new(width, height, pixels)
    }
}

/// Row-major boolean mask; `true` marks a dynamic-object pixel excluded from
/// losses and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "mask has {} bits, expected {}",
                bits.len(),
                width as usize * height as usize
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask that excludes nothing.
    pub fn all_clear(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_masked(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, masked: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = masked;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_masked(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn matches_dimensions(&self, img: &ImageBuffer) -> bool {
        self.width == img.width() && self.height == img.height()
    }
}

/// Reads an 8-bit PNG (RGB, RGBA or grayscale) or binary PPM (P6).
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read image {}: {e}", path.display())))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(b"P6") {
        let (w, h, data) = decode_ppm(bytes, 3)?;
        ImageBuffer::from_u8(w, h, &data)
    } else {
        let (w, h, data) = decode_png_rgb(bytes)?;
        ImageBuffer::from_u8(w, h, &data)
    }
}

/// Reads an 8-bit single-channel mask image, thresholded at 128
/// (value >= 128 means dynamic / excluded). RGB inputs use the first channel.
pub fn read_mask(path: &Path) -> Result<PixelMask> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read mask {}: {e}", path.display())))?;
    let (w, h, data, channels) = if bytes.starts_with(b"P6") {
        let (w, h, data) = decode_ppm(&bytes, 3)?;
        (w, h, data, 3)
    } else if bytes.starts_with(b"P5") {
        let (w, h, data) = decode_ppm(&bytes, 1)?;
        (w, h, data, 1)
    } else {
        let (w, h, data, channels) = decode_png_raw(&bytes)?;
        (w, h, data, channels)
    };
    let bits = data
        .chunks(channels)
        .map(|px| px[0] >= 128)
        .collect::<Vec<_>>();
    PixelMask::new(w, h, bits)
}

/// Writes an 8-bit image; the format follows the file extension
/// (`.ppm` -> binary P6, anything else -> RGB PNG).
pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let data = img.to_u8();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "ppm" {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        write!(w, "P6\n{} {}\n255\n", img.width(), img.height())?;
        w.write_all(&data)?;
        w.flush()?;
        Ok(())
    } else {
        let f = File::create(path)?;
        let w = BufWriter::new(f);
        let mut encoder = png::Encoder::new(w, img.width(), img.height());
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Load(format!("png encode failed: {e}")))?;
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Load(format!("png encode failed: {e}")))?;
        Ok(())
    }
}

/// Encodes to PNG bytes in memory; used by the external-enhancer plumbing.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width(), img.height());
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Load(format!("png encode failed: {e}")))?;
        writer
            .write_image_data(&img.to_u8())
            .map_err(|e| Error::Load(format!("png encode failed: {e}")))?;
    }
    Ok(out)
}

fn decode_png_rgb(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let (w, h, data, channels) = decode_png_raw(bytes)?;
    let rgb = match channels {
        1 => data.iter().flat_map(|&v| [v, v, v]).collect(),
        3 => data,
        4 => data
            .chunks(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        _ => unreachable!(),
    };
    Ok((w, h, rgb))
}

fn decode_png_raw(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>, usize)> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::parse(0, format!("not a supported PNG/PPM image: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(0, format!("png decode failed: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::InvalidInput(format!(
            "unsupported bit depth {:?}, only 8-bit images are accepted",
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::InvalidInput(format!(
                "unsupported PNG color type {other:?}"
            )))
        }
    };
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf, channels))
}

/// Binary PPM (P6) / PGM (P5) decoder.
fn decode_ppm(bytes: &[u8], channels: usize) -> Result<(u32, u32, Vec<u8>)> {
    let mut r = PpmScanner { bytes, pos: 0 };
    let magic = r.token()?;
    let expected = if channels == 3 { "P6" } else { "P5" };
    if magic != expected {
        return Err(Error::parse(0, format!("expected {expected} magic, got {magic}")));
    }
    let w: u32 = r.number()?;
    let h: u32 = r.number()?;
    let maxval: u32 = r.number()?;
    if maxval != 255 {
        return Err(Error::InvalidInput(format!(
            "unsupported bit depth: PPM maxval {maxval}, only 255 is accepted"
        )));
    }
    // Exactly one whitespace byte separates the header from raster data.
    r.pos += 1;
    let need = w as usize * h as usize * channels;
    let rest = &r.bytes[r.pos.min(r.bytes.len())..];
    if rest.len() < need {
        return Err(Error::parse(
            r.pos as u64,
            format!("truncated PPM raster: have {} bytes, need {need}", rest.len()),
        ));
    }
    Ok((w, h, rest[..need].to_vec()))
}

struct PpmScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmScanner<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start as u64, "unexpected end of PPM header"));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<u32> {
        let start = self.pos;
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| Error::parse(start as u64, format!("invalid PPM header number {tok:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_ppm_decodes_to_zeros() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00";
        let img = decode_image(bytes).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn u8_value_maps_exactly() {
        let img = ImageBuffer::from_u8(1, 1, &[128, 0, 255]).unwrap();
        assert_eq!(img.pixel(0, 0), [128.0 / 255.0, 0.0, 1.0]);
    }

    #[test]
    fn write_read_idempotent_after_one_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let raw: Vec<f64> = (0..4 * 3 * 3).map(|i| (i as f64 * 0.073) % 1.0).collect();
        let img = ImageBuffer::new(4, 3, raw).unwrap();

        write_image(&path, &img).unwrap();
        let once = read_image(&path).unwrap();
        write_image(&path, &once).unwrap();
        let twice = read_image(&path).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn ppm_roundtrip_matches_png() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<f64> = (0..5 * 2 * 3).map(|i| (i as f64 / 29.0) % 1.0).collect();
        let img = ImageBuffer::new(5, 2, raw).unwrap();
        let ppm = dir.path().join("x.ppm");
        let png = dir.path().join("x.png");
        write_image(&ppm, &img).unwrap();
        write_image(&png, &img).unwrap();
        assert_eq!(read_image(&ppm).unwrap(), read_image(&png).unwrap());
    }

    #[test]
    fn truncated_ppm_reports_offset() {
        let bytes = b"P6\n2 2\n255\n\x00\x00\x00";
        match decode_image(bytes) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mask_threshold_at_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        std::fs::write(&path, b"P5\n3 1\n255\n\x7f\x80\xff").unwrap();
        let mask = read_mask(&path).unwrap();
        assert!(!mask.is_masked(0, 0));
        assert!(mask.is_masked(1, 0));
        assert!(mask.is_masked(2, 0));
    }

    #[test]
    fn buffer_rejects_out_of_range() {
        assert!(ImageBuffer::new(1, 1, vec![0.0, 0.5, 1.001]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0, -0.1, 1.0]).is_err());
        assert!(ImageBuffer::new(1, 1, vec![0.0; 4]).is_err());
    }

    #[test]
    fn sixteen_bit_png_rejected() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 2 * 2 * 3 * 2]).unwrap();
        }
        match decode_image(&bytes) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("bit depth"), "{msg}"),
            other => panic!("expected bit-depth rejection, got {other:?}"),
        }
    }

    #[test]
    fn deep_ppm_rejected() {
        let bytes = b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00";
        assert!(matches!(decode_image(bytes), Err(Error::InvalidInput(_))));
    }
}
