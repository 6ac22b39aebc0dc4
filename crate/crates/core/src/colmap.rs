//! Readers and writers for COLMAP sparse-reconstruction files
//! (`cameras.bin/.txt`, `images.bin/.txt`, `points3D.bin/.txt`).
//!
//! Binary layouts follow the public COLMAP format exactly, little-endian
//! throughout. Track and 2D-observation sub-records are parsed for framing
//! correctness but not retained. Writers emit canonical files: sequential
//! point ids, empty tracks and observation lists.

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::math::quat_norm;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

/// Colored sparse point cloud used to initialize Gaussian primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// Meters.
    pub positions: Vec<[f64; 3]>,
    /// RGB in [0, 1].
    pub colors: Vec<[f64; 3]>,
    /// Per-point reprojection error, when the source file provides one.
    pub errors: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<[f64; 3]>,
        colors: Vec<[f64; 3]>,
        errors: Option<Vec<f64>>,
    ) -> Result<Self> {
        if positions.len() != colors.len() {
            return Err(Error::InvalidInput(format!(
                "point cloud has {} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(e) = &errors {
            if e.len() != positions.len() {
                return Err(Error::InvalidInput(
                    "per-point error list length mismatch".into(),
                ));
            }
        }
        if colors
            .iter()
            .any(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidInput("point color outside [0, 1]".into()));
        }
        Ok(Self {
            positions,
            colors,
            errors,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Deterministic uniform subsample without replacement.
    pub fn subsample(&self, keep: usize, seed: u64) -> PointCloud {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if keep >= self.len() {
            return self.clone();
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
        PointCloud {
            positions: idx.iter().map(|&i| self.positions[i]).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
            errors: self
                .errors
                .as_ref()
                .map(|e| idx.iter().map(|&i| e[i]).collect()),
        }
    }
}

/// One registered image in a reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub pose: CameraPose,
    pub camera_id: u32,
    pub name: String,
}

/// Summary counts for `inspect`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ReconstructionSummary {
    pub num_cameras: usize,
    pub num_images: usize,
    pub num_points: usize,
    pub bbox_min: Option<[f64; 3]>,
    pub bbox_max: Option<[f64; 3]>,
    pub mean_track_length: f64,
}

const MODEL_NAMES: &[(i32, &str, usize)] = &[
    (0, "SIMPLE_PINHOLE", 3),
    (1, "PINHOLE", 4),
    (2, "SIMPLE_RADIAL", 4),
    (3, "RADIAL", 5),
    (4, "OPENCV", 8),
    (5, "OPENCV_FISHEYE", 8),
    (6, "FULL_OPENCV", 12),
    (7, "FOV", 5),
    (8, "SIMPLE_RADIAL_FISHEYE", 4),
    (9, "RADIAL_FISHEYE", 5),
    (10, "THIN_PRISM_FISHEYE", 12),
];

fn model_by_id(id: i32) -> Option<(&'static str, usize)> {
    MODEL_NAMES
        .iter()
        .find(|(mid, _, _)| *mid == id)
        .map(|(_, name, n)| (*name, *n))
}

fn model_by_name(name: &str) -> Option<(i32, usize)> {
    MODEL_NAMES
        .iter()
        .find(|(_, n, _)| *n == name)
        .map(|(id, _, np)| (*id, *np))
}

/// Little-endian cursor that remembers its byte offset for error reporting.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.pos as u64,
                format!("truncated file while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(LittleEndian::read_i32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8, what)?))
    }

    fn cstr(&mut self, what: &str) -> Result<String> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != 0 {
            self.pos += 1;
        }
        if self.pos == self.bytes.len() {
            return Err(Error::parse(
                start as u64,
                format!("unterminated string while reading {what}"),
            ));
        }
        let s = String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned();
        self.pos += 1;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn check_trailing(r: &Reader, what: &str) -> Result<()> {
    if !r.done() {
        return Err(Error::parse(
            r.pos as u64,
            format!("{} trailing bytes after last {what} record", r.bytes.len() - r.pos),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// points3D
// ---------------------------------------------------------------------------

struct Point3dRecord {
    xyz: [f64; 3],
    rgb: [u8; 3],
    error: f64,
    track_len: usize,
}

fn parse_points3d_bin_records(bytes: &[u8]) -> Result<Vec<Point3dRecord>> {
    let mut r = Reader::new(bytes);
    let count = r.u64("point count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let offset = r.pos as u64;
        let _id = r.u64("point id")?;
        let xyz = [r.f64("x")?, r.f64("y")?, r.f64("z")?];
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(
                offset,
                format!("non-finite coordinates in point record {i}"),
            ));
        }
        let rgb = [r.u8("r")?, r.u8("g")?, r.u8("b")?];
        let error = r.f64("reprojection error")?;
        let track_len = r.u64("track length")?;
        for _ in 0..track_len {
            r.i32("track image id")?;
            r.i32("track point2D idx")?;
        }
        out.push(Point3dRecord {
            xyz,
            rgb,
            error,
            track_len: track_len as usize,
        });
    }
    check_trailing(&r, "point")?;
    Ok(out)
}

fn records_to_cloud(records: Vec<Point3dRecord>) -> Result<PointCloud> {
    let positions = records.iter().map(|p| p.xyz).collect();
    let colors = records
        .iter()
        .map(|p| {
            [
                p.rgb[0] as f64 / 255.0,
                p.rgb[1] as f64 / 255.0,
                p.rgb[2] as f64 / 255.0,
            ]
        })
        .collect();
    let errors = records.iter().map(|p| p.error).collect();
    PointCloud::new(positions, colors, Some(errors))
}

/// Parses a binary `points3D.bin` file. Track data is validated and dropped.
pub fn parse_points3d_bin(bytes: &[u8]) -> Result<PointCloud> {
    records_to_cloud(parse_points3d_bin_records(bytes)?)
}

/// Parses a text `points3D.txt` file (`#` comments skipped).
pub fn parse_points3d_text(text: &str) -> Result<PointCloud> {
    records_to_cloud(parse_points3d_text_records(text)?)
}

fn parse_points3d_text_records(text: &str) -> Result<Vec<Point3dRecord>> {
    let mut out = Vec::new();
    for (offset, line) in lines_with_offsets(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 8 {
            return Err(Error::parse(
                offset,
                format!("point line has {} fields, expected at least 8", fields.len()),
            ));
        }
        let mut xyz = [0.0f64; 3];
        for (i, v) in xyz.iter_mut().enumerate() {
            *v = parse_field(fields[1 + i], offset, "coordinate")?;
        }
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(offset, "non-finite coordinates in point line"));
        }
        let mut rgb = [0u8; 3];
        for (i, v) in rgb.iter_mut().enumerate() {
            *v = parse_field(fields[4 + i], offset, "color")?;
        }
        let error: f64 = parse_field(fields[7], offset, "reprojection error")?;
        let track = &fields[8..];
        if !track.len().is_multiple_of(2) {
            return Err(Error::parse(offset, "odd track element count"));
        }
        for t in track {
            let _: i64 = parse_field(t, offset, "track element")?;
        }
        out.push(Point3dRecord {
            xyz,
            rgb,
            error,
            track_len: track.len() / 2,
        });
    }
    Ok(out)
}

/// Canonical binary writer: sequential ids from 1, empty tracks.
pub fn write_points3d_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + pc.len() * 51);
    push_u64(&mut out, pc.len() as u64);
    for i in 0..pc.len() {
        push_u64(&mut out, i as u64 + 1);
        for v in pc.positions[i] {
            push_f64(&mut out, v);
        }
        for c in pc.colors[i] {
            out.push(quantize_color(c));
        }
        push_f64(&mut out, point_error(pc, i));
        push_u64(&mut out, 0); // track length
    }
    out
}

/// Canonical text writer, mirroring the binary writer.
pub fn write_points3d_text(pc: &PointCloud) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]");
    for i in 0..pc.len() {
        let p = pc.positions[i];
        let c = pc.colors[i];
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            i + 1,
            p[0],
            p[1],
            p[2],
            quantize_color(c[0]),
            quantize_color(c[1]),
            quantize_color(c[2]),
            point_error(pc, i)
        );
    }
    s
}

fn point_error(pc: &PointCloud, i: usize) -> f64 {
    // COLMAP convention: -1 marks an unset reprojection error.
    pc.errors.as_ref().map_or(-1.0, |e| e[i])
}

fn quantize_color(c: f64) -> u8 {
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

// ---------------------------------------------------------------------------
// cameras
// ---------------------------------------------------------------------------

fn intrinsics_from_params(
    model_id: i32,
    width: u64,
    height: u64,
    params: &[f64],
) -> Result<CameraIntrinsics> {
    match model_id {
        0 => CameraIntrinsics::new(
            params[0], params[0], params[1], params[2], width as u32, height as u32,
        ),
        1 => CameraIntrinsics::new(
            params[0], params[1], params[2], params[3], width as u32, height as u32,
        ),
        other => Err(Error::UnsupportedCameraModel {
            model_id: other,
            name: model_by_id(other)
                .map(|(n, _)| n.to_string())
                .unwrap_or_else(|| format!("unknown model {other}")),
        }),
    }
}

/// Parses a binary `cameras.bin` file into a camera-id -> intrinsics map.
/// Only PINHOLE and SIMPLE_PINHOLE models are accepted.
pub fn parse_cameras_bin(bytes: &[u8]) -> Result<BTreeMap<u32, CameraIntrinsics>> {
    let mut r = Reader::new(bytes);
    let count = r.u64("camera count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let offset = r.pos as u64;
        let camera_id = r.i32("camera id")?;
        if camera_id < 0 {
            return Err(Error::parse(offset, format!("negative camera id {camera_id}")));
        }
        let model_id = r.i32("model id")?;
        let width = r.u64("width")?;
        let height = r.u64("height")?;
        let num_params = model_by_id(model_id)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::parse(offset, format!("unknown camera model id {model_id}")))?;
        let mut params = vec![0.0; num_params];
        for p in params.iter_mut() {
            *p = r.f64("camera parameter")?;
        }
        let intr = intrinsics_from_params(model_id, width, height, &params)?;
        out.insert(camera_id as u32, intr);
    }
    check_trailing(&r, "camera")?;
    Ok(out)
}

/// Parses a text `cameras.txt` file.
pub fn parse_cameras_text(text: &str) -> Result<BTreeMap<u32, CameraIntrinsics>> {
    let mut out = BTreeMap::new();
    for (offset, line) in lines_with_offsets(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::parse(offset, "camera line has too few fields"));
        }
        let camera_id: u32 = parse_field(fields[0], offset, "camera id")?;
        let (model_id, num_params) = model_by_name(fields[1])
            .ok_or_else(|| Error::parse(offset, format!("unknown camera model {}", fields[1])))?;
        let width: u64 = parse_field(fields[2], offset, "width")?;
        let height: u64 = parse_field(fields[3], offset, "height")?;
        if fields.len() != 4 + num_params {
            return Err(Error::parse(
                offset,
                format!(
                    "camera model {} expects {num_params} parameters, line has {}",
                    fields[1],
                    fields.len() - 4
                ),
            ));
        }
        let mut params = vec![0.0; num_params];
        for (i, p) in params.iter_mut().enumerate() {
            *p = parse_field(fields[4 + i], offset, "camera parameter")?;
        }
        out.insert(
            camera_id,
            intrinsics_from_params(model_id, width, height, &params)?,
        );
    }
    Ok(out)
}

/// Canonical binary camera writer; always emits the PINHOLE model.
pub fn write_cameras_bin(cams: &BTreeMap<u32, CameraIntrinsics>) -> Vec<u8> {
    let mut out = Vec::new();
    push_u64(&mut out, cams.len() as u64);
    for (&id, c) in cams {
        push_i32(&mut out, id as i32);
        push_i32(&mut out, 1); // PINHOLE
        push_u64(&mut out, c.width as u64);
        push_u64(&mut out, c.height as u64);
        for v in [c.fx, c.fy, c.cx, c.cy] {
            push_f64(&mut out, v);
        }
    }
    out
}

pub fn write_cameras_text(cams: &BTreeMap<u32, CameraIntrinsics>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]");
    for (&id, c) in cams {
        let _ = writeln!(
            s,
            "{id} PINHOLE {} {} {} {} {} {}",
            c.width, c.height, c.fx, c.fy, c.cx, c.cy
        );
    }
    s
}

// ---------------------------------------------------------------------------
// images
// ---------------------------------------------------------------------------

/// Largest accepted deviation of a stored quaternion from unit norm.
pub const IMAGE_QUAT_NORM_TOL: f64 = 1e-3;

fn pose_from_raw(q: [f64; 4], t: [f64; 3], offset: u64) -> Result<CameraPose> {
    let n = quat_norm(q);
    if !n.is_finite() || (n - 1.0).abs() > IMAGE_QUAT_NORM_TOL {
        return Err(Error::parse(
            offset,
            format!("image quaternion norm {n} deviates from 1 by more than {IMAGE_QUAT_NORM_TOL}"),
        ));
    }
    CameraPose::new(q, t)
}

/// Parses a binary `images.bin` file into an image-id -> record map.
/// Per-image 2D observations are validated and dropped.
pub fn parse_images_bin(bytes: &[u8]) -> Result<BTreeMap<u32, ImageRecord>> {
    let mut r = Reader::new(bytes);
    let count = r.u64("image count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let offset = r.pos as u64;
        let image_id = r.i32("image id")?;
        if image_id < 0 {
            return Err(Error::parse(offset, format!("negative image id {image_id}")));
        }
        let q = [
            r.f64("qw")?,
            r.f64("qx")?,
            r.f64("qy")?,
            r.f64("qz")?,
        ];
        let t = [r.f64("tx")?, r.f64("ty")?, r.f64("tz")?];
        let camera_id = r.i32("camera id")?;
        if camera_id < 0 {
            return Err(Error::parse(offset, format!("negative camera id {camera_id}")));
        }
        let name = r.cstr("image name")?;
        let num_points = r.u64("observation count")?;
        for _ in 0..num_points {
            r.f64("observation x")?;
            r.f64("observation y")?;
            r.u64("observation point3D id")?;
        }
        out.insert(
            image_id as u32,
            ImageRecord {
                pose: pose_from_raw(q, t, offset)?,
                camera_id: camera_id as u32,
                name,
            },
        );
    }
    check_trailing(&r, "image")?;
    Ok(out)
}

/// Parses a text `images.txt` file (two lines per image; the observation
/// line may be empty).
pub fn parse_images_text(text: &str) -> Result<BTreeMap<u32, ImageRecord>> {
    let mut out = BTreeMap::new();
    let mut lines = lines_with_offsets_keep_empty(text).into_iter();
    while let Some((offset, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 10 {
            return Err(Error::parse(offset, "image line has too few fields"));
        }
        let image_id: u32 = parse_field(fields[0], offset, "image id")?;
        let mut q = [0.0f64; 4];
        for (i, v) in q.iter_mut().enumerate() {
            *v = parse_field(fields[1 + i], offset, "quaternion component")?;
        }
        let mut t = [0.0f64; 3];
        for (i, v) in t.iter_mut().enumerate() {
            *v = parse_field(fields[5 + i], offset, "translation component")?;
        }
        let camera_id: u32 = parse_field(fields[8], offset, "camera id")?;
        let name = fields[9..].join(" ");
        // Observation line: triplets of X Y POINT3D_ID, possibly empty.
        let (obs_offset, obs) = lines.next().unwrap_or((offset, ""));
        let obs_fields: Vec<&str> = obs.split_whitespace().collect();
        if !obs_fields.len().is_multiple_of(3) {
            return Err(Error::parse(
                obs_offset,
                "observation line length is not a multiple of 3",
            ));
        }
        for f in obs_fields {
            let _: f64 = parse_field(f, obs_offset, "observation field")?;
        }
        out.insert(
            image_id,
            ImageRecord {
                pose: pose_from_raw(q, t, offset)?,
                camera_id,
                name,
            },
        );
    }
    Ok(out)
}

/// Canonical binary image writer: empty observation lists.
pub fn write_images_bin(images: &BTreeMap<u32, ImageRecord>) -> Vec<u8> {
    let mut out = Vec::new();
    push_u64(&mut out, images.len() as u64);
    for (&id, rec) in images {
        push_i32(&mut out, id as i32);
        for v in rec.pose.rotation {
            push_f64(&mut out, v);
        }
        for v in rec.pose.translation {
            push_f64(&mut out, v);
        }
        push_i32(&mut out, rec.camera_id as i32);
        out.extend_from_slice(rec.name.as_bytes());
        out.push(0);
        push_u64(&mut out, 0); // observations
    }
    out
}

pub fn write_images_text(images: &BTreeMap<u32, ImageRecord>) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME"
    );
    for (&id, rec) in images {
        let q = rec.pose.rotation;
        let t = rec.pose.translation;
        let _ = writeln!(
            s,
            "{id} {} {} {} {} {} {} {} {} {}",
            q[0], q[1], q[2], q[3], t[0], t[1], t[2], rec.camera_id, rec.name
        );
        s.push('\n'); // empty observation line
    }
    s
}

// ---------------------------------------------------------------------------
// directory-level helpers
// ---------------------------------------------------------------------------

/// A parsed sparse reconstruction directory.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub images: BTreeMap<u32, ImageRecord>,
    pub points: PointCloud,
}

fn read_variant(dir: &Path, stem: &str) -> Result<(Vec<u8>, bool)> {
    let bin = dir.join(format!("{stem}.bin"));
    let txt = dir.join(format!("{stem}.txt"));
    if bin.is_file() {
        Ok((std::fs::read(&bin)?, true))
    } else if txt.is_file() {
        Ok((std::fs::read(&txt)?, false))
    } else {
        Err(Error::Load(format!(
            "neither {stem}.bin nor {stem}.txt found in {}",
            dir.display()
        )))
    }
}

/// Loads a reconstruction from a directory holding `cameras`, `images` and
/// `points3D` files, preferring `.bin` over `.txt`.
pub fn load_reconstruction(dir: &Path) -> Result<Reconstruction> {
    let (cam_bytes, cam_bin) = read_variant(dir, "cameras")?;
    let cameras = if cam_bin {
        parse_cameras_bin(&cam_bytes)?
    } else {
        parse_cameras_text(&text_of(&cam_bytes)?)?
    };
    let (img_bytes, img_bin) = read_variant(dir, "images")?;
    let images = if img_bin {
        parse_images_bin(&img_bytes)?
    } else {
        parse_images_text(&text_of(&img_bytes)?)?
    };
    let (pt_bytes, pt_bin) = read_variant(dir, "points3D")?;
    let points = if pt_bin {
        parse_points3d_bin(&pt_bytes)?
    } else {
        parse_points3d_text(&text_of(&pt_bytes)?)?
    };
    Ok(Reconstruction {
        cameras,
        images,
        points,
    })
}

/// Reconstruction statistics for the `inspect` command.
pub fn summarize(dir: &Path) -> Result<ReconstructionSummary> {
    let (cam_bytes, cam_bin) = read_variant(dir, "cameras")?;
    let cameras = if cam_bin {
        parse_cameras_bin(&cam_bytes)?
    } else {
        parse_cameras_text(&text_of(&cam_bytes)?)?
    };
    let (img_bytes, img_bin) = read_variant(dir, "images")?;
    let images = if img_bin {
        parse_images_bin(&img_bytes)?
    } else {
        parse_images_text(&text_of(&img_bytes)?)?
    };
    let (pt_bytes, pt_bin) = read_variant(dir, "points3D")?;
    let records = if pt_bin {
        parse_points3d_bin_records(&pt_bytes)?
    } else {
        parse_points3d_text_records(&text_of(&pt_bytes)?)?
    };

    let mut bbox_min = None;
    let mut bbox_max = None;
    for rec in &records {
        let lo = bbox_min.get_or_insert(rec.xyz);
        let hi = bbox_max.get_or_insert(rec.xyz);
        for i in 0..3 {
            lo[i] = lo[i].min(rec.xyz[i]);
            hi[i] = hi[i].max(rec.xyz[i]);
        }
    }
    let mean_track_length = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.track_len as f64).sum::<f64>() / records.len() as f64
    };
    Ok(ReconstructionSummary {
        num_cameras: cameras.len(),
        num_images: images.len(),
        num_points: records.len(),
        bbox_min,
        bbox_max,
        mean_track_length,
    })
}

fn text_of(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec())
        .map_err(|e| Error::parse(e.utf8_error().valid_up_to() as u64, "file is not valid UTF-8"))
}

// ---------------------------------------------------------------------------
// shared low-level helpers
// ---------------------------------------------------------------------------

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Non-comment, non-empty lines with their byte offsets.
fn lines_with_offsets(text: &str) -> Vec<(u64, &str)> {
    lines_with_offsets_keep_empty(text)
        .into_iter()
        .filter(|(_, l)| !l.is_empty())
        .collect()
}

fn lines_with_offsets_keep_empty(text: &str) -> Vec<(u64, &str)> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split('\n') {
        let trimmed = line.trim_end_matches('\r').trim();
        if !trimmed.starts_with('#') {
            out.push((offset, trimmed));
        }
        offset += line.len() as u64 + 1;
    }
    // Drop a trailing empty line produced by a final newline.
    if let Some(&(_, last)) = out.last() {
        if last.is_empty() {
            out.pop();
        }
    }
    out
}

fn parse_field<T: std::str::FromStr>(s: &str, offset: u64, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(offset, format!("invalid {what}: {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_points_file() {
        let pc = parse_points3d_bin(&0u64.to_le_bytes()).unwrap();
        assert!(pc.is_empty());
    }

    #[test]
    fn hand_assembled_single_point() {
        // Assembled field by field from the published layout.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes()); // count
        bytes.extend_from_slice(&7u64.to_le_bytes()); // id
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        bytes.extend_from_slice(&2.0f64.to_le_bytes());
        bytes.extend_from_slice(&3.0f64.to_le_bytes());
        bytes.extend_from_slice(&[255u8, 0, 0]); // rgb
        bytes.extend_from_slice(&0.5f64.to_le_bytes()); // error
        bytes.extend_from_slice(&2u64.to_le_bytes()); // track length
        bytes.extend_from_slice(&10i32.to_le_bytes());
        bytes.extend_from_slice(&3i32.to_le_bytes());
        bytes.extend_from_slice(&11i32.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());

        let pc = parse_points3d_bin(&bytes).unwrap();
        assert_eq!(pc.positions, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(pc.colors, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(pc.errors, Some(vec![0.5]));
    }

    #[test]
    fn truncated_points_file_reports_offset() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&7u64.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        match parse_points3d_bin(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_coordinates_rejected() {
        let pc = PointCloud::new(vec![[f64::NAN; 3]], vec![[0.0; 3]], None).unwrap();
        let bytes = write_points3d_bin(&pc);
        assert!(matches!(
            parse_points3d_bin(&bytes),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn points_roundtrip_byte_identical() {
        let pc = PointCloud::new(
            vec![[0.25, -1.5, 3.0], [1e-3, 2.0, -7.25]],
            vec![[0.0, 0.5019607843137255, 1.0], [1.0, 0.0, 0.0]],
            Some(vec![0.75, -1.0]),
        )
        .unwrap();
        let bytes = write_points3d_bin(&pc);
        let reparsed = parse_points3d_bin(&bytes).unwrap();
        assert_eq!(write_points3d_bin(&reparsed), bytes);
    }

    #[test]
    fn simple_pinhole_maps_to_equal_focals() {
        let text = "# comment\n1 SIMPLE_PINHOLE 100 80 100 50 40\n";
        let cams = parse_cameras_text(text).unwrap();
        let c = &cams[&1];
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (100.0, 100.0, 50.0, 40.0));
        assert_eq!((c.width, c.height), (100, 80));
    }

    #[test]
    fn pinhole_focals_preserved_distinctly() {
        let text = "1 PINHOLE 100 80 90 100 50 40\n";
        let cams = parse_cameras_text(text).unwrap();
        assert_eq!((cams[&1].fx, cams[&1].fy), (90.0, 100.0));
    }

    #[test]
    fn radial_model_rejected_by_name() {
        let text = "1 RADIAL 100 80 90 50 40 0.1 0.01\n";
        match parse_cameras_text(text) {
            Err(Error::UnsupportedCameraModel { model_id, name }) => {
                assert_eq!(model_id, 3);
                assert_eq!(name, "RADIAL");
            }
            other => panic!("expected unsupported-model error, got {other:?}"),
        }
    }

    #[test]
    fn radial_model_rejected_in_binary() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes()); // camera id
        bytes.extend_from_slice(&3i32.to_le_bytes()); // RADIAL
        bytes.extend_from_slice(&100u64.to_le_bytes());
        bytes.extend_from_slice(&80u64.to_le_bytes());
        for v in [90.0f64, 50.0, 40.0, 0.1, 0.01] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            parse_cameras_bin(&bytes),
            Err(Error::UnsupportedCameraModel { model_id: 3, .. })
        ));
    }

    #[test]
    fn image_identity_pose() {
        let text = "5 1 0 0 0 0 0 0 2 frame.png\n\n";
        let images = parse_images_text(text).unwrap();
        let rec = &images[&5];
        assert_eq!(rec.pose, CameraPose::identity());
        assert_eq!(rec.camera_id, 2);
        assert_eq!(rec.name, "frame.png");
    }

    #[test]
    fn image_quat_renormalized_within_tolerance() {
        // norm 0.9995 is inside the 1e-3 acceptance band
        let text = "1 0.9995 0 0 0 0 0 0 1 a.png\n\n";
        let images = parse_images_text(text).unwrap();
        assert!((quat_norm(images[&1].pose.rotation) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_quat_far_from_unit_rejected() {
        let text = "1 0.5 0 0 0 0 0 0 1 a.png\n\n";
        assert!(matches!(
            parse_images_text(text),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn images_binary_roundtrip() {
        let mut images = BTreeMap::new();
        images.insert(
            3,
            ImageRecord {
                pose: CameraPose::new([0.9, 0.1, -0.2, 0.3], [1.0, 2.0, -0.5]).unwrap(),
                camera_id: 1,
                name: "im 3.png".into(),
            },
        );
        let bytes = write_images_bin(&images);
        let parsed = parse_images_bin(&bytes).unwrap();
        assert_eq!(parsed, images);
        assert_eq!(write_images_bin(&parsed), bytes);
    }

    #[test]
    fn text_and_binary_parsers_agree() {
        let mut cams = BTreeMap::new();
        cams.insert(
            1,
            CameraIntrinsics::new(90.0, 100.0, 50.0, 40.0, 100, 80).unwrap(),
        );
        let from_bin = parse_cameras_bin(&write_cameras_bin(&cams)).unwrap();
        let from_text = parse_cameras_text(&write_cameras_text(&cams)).unwrap();
        assert_eq!(from_bin, from_text);
    }

    #[test]
    fn summarize_counts_and_track_lengths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("cameras.txt"),
            "1 PINHOLE 100 80 90 100 50 40\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("images.txt"),
            "1 1 0 0 0 0 0 0 1 a.png\n\n2 1 0 0 0 0.5 0 0 1 b.png\n\n",
        )
        .unwrap();
        // Tracks of length 2 and 0: mean 1.0.
        std::fs::write(
            dir.path().join("points3D.txt"),
            "1 0 0 1 10 20 30 0.5 1 0 2 1\n2 3 -1 2 0 0 0 -1\n",
        )
        .unwrap();
        let s = summarize(dir.path()).unwrap();
        assert_eq!(s.num_cameras, 1);
        assert_eq!(s.num_images, 2);
        assert_eq!(s.num_points, 2);
        assert_eq!(s.mean_track_length, 1.0);
        assert_eq!(s.bbox_min, Some([0.0, -1.0, 1.0]));
        assert_eq!(s.bbox_max, Some([3.0, 0.0, 2.0]));
    }

    #[test]
    fn summarize_empty_reconstruction() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cameras.txt"), "# none\n").unwrap();
        std::fs::write(dir.path().join("images.txt"), "# none\n").unwrap();
        std::fs::write(dir.path().join("points3D.txt"), "# none\n").unwrap();
        let s = summarize(dir.path()).unwrap();
        assert_eq!(s.num_cameras, 0);
        assert_eq!(s.num_images, 0);
        assert_eq!(s.num_points, 0);
        assert_eq!(s.mean_track_length, 0.0);
        assert_eq!(s.bbox_min, None);
    }
}
