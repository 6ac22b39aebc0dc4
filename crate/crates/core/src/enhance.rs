//! Post-render enhancement: reference-frame selection and the pluggable
//! enhancer interface, with built-in classical plugins and an out-of-process
//! hook for learned models.

use crate::camera::{pose_distance, CameraPose};
use crate::error::{Error, Result};
use crate::image::{encode_png, read_image, write_image, ImageBuffer};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::time::{Duration, Instant};

/// Default wall-clock budget for one external enhancer invocation.
pub const DEFAULT_EXTERNAL_TIMEOUT_S: f64 = 120.0;
/// Environment variable overriding the external-enhancer timeout, seconds.
pub const TIMEOUT_ENV_VAR: &str = "SPLATNVS_TIMEOUT_S";

/// An enhancer maps (render, reference) to an output of the render's
/// dimensions with values in [0, 1].
pub trait EnhancerPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn enhance(&self, render: &ImageBuffer, reference: &ImageBuffer) -> Result<ImageBuffer>;
}

/// Index of the source whose pose minimizes the weighted pose distance to
/// the target; ties break to the lowest index.
pub fn select_reference(
    sources: &[CameraPose],
    target: &CameraPose,
    lambda_tr: f64,
    lambda_rot: f64,
) -> Result<usize> {
    if sources.is_empty() {
        return Err(Error::InvalidInput(
            "reference selection needs at least one source pose".into(),
        ));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in sources.iter().enumerate() {
        let d = pose_distance(s, target, lambda_tr, lambda_rot)?;
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Passes the render through untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEnhancer;

impl EnhancerPlugin for IdentityEnhancer {
    fn name(&self) -> &str {
        "identity"
    }

    fn enhance(&self, render: &ImageBuffer, _reference: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(render.clone())
    }
}

/// Matches the render's global per-channel mean and standard deviation to
/// the reference's: `out = (render - mu_r) * (sigma_ref / sigma_r) + mu_ref`,
/// clamped to [0, 1]. A near-constant render channel is only mean-shifted.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorMatchEnhancer;

const SIGMA_FLOOR: f64 = 1e-6;

fn channel_stats(img: &ImageBuffer) -> ([f64; 3], [f64; 3]) {
    let n = (img.pixels().len() / 3) as f64;
    let mut mean = [0.0; 3];
    for px in img.pixels().chunks(3) {
        for ch in 0..3 {
            mean[ch] += px[ch];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; 3];
    for px in img.pixels().chunks(3) {
        for ch in 0..3 {
            let d = px[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    let sigma = [
        (var[0] / n).sqrt(),
        (var[1] / n).sqrt(),
        (var[2] / n).sqrt(),
    ];
    (mean, sigma)
}

impl EnhancerPlugin for ColorMatchEnhancer {
    fn name(&self) -> &str {
        "color-match"
    }

    fn enhance(&self, render: &ImageBuffer, reference: &ImageBuffer) -> Result<ImageBuffer> {
        let (mu_r, sigma_r) = channel_stats(render);
        let (mu_ref, sigma_ref) = channel_stats(reference);
        let mut out = Vec::with_capacity(render.pixels().len());
        for px in render.pixels().chunks(3) {
            for ch in 0..3 {
                let v = if sigma_r[ch] < SIGMA_FLOOR {
                    px[ch] - mu_r[ch] + mu_ref[ch]
                } else {
                    (px[ch] - mu_r[ch]) * (sigma_ref[ch] / sigma_r[ch]) + mu_ref[ch]
                };
                out.push(v.clamp(0.0, 1.0));
            }
        }
        ImageBuffer::new(render.width(), render.height(), out)
    }
}

/// Out-of-process enhancer. The command is invoked as
/// `<cmd> --render <in.png> --reference <ref.png> --out <out.png>` and must
/// exit 0 after writing an 8-bit PNG of the render's dimensions.
#[derive(Debug, Clone)]
pub struct ExternalEnhancer {
    argv: Vec<String>,
    timeout: Duration,
}

impl ExternalEnhancer {
    /// `command` is whitespace-split into program and leading arguments.
    /// The timeout defaults to 120 s; `SPLATNVS_TIMEOUT_S` overrides both
    /// the default and any configured value.
    pub fn new(command: &str, timeout_s: Option<f64>) -> Result<Self> {
        let argv: Vec<String> = command.split_whitespace().map(str::to_string).collect();
        if argv.is_empty() {
            return Err(Error::InvalidInput("empty external enhancer command".into()));
        }
        let timeout_s = std::env::var(TIMEOUT_ENV_VAR)
            .ok()
            .and_then(|v| v.parse::<f64>().ok())
            .or(timeout_s)
            .unwrap_or(DEFAULT_EXTERNAL_TIMEOUT_S);
        if timeout_s.is_nan() || timeout_s <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "enhancer timeout must be positive, got {timeout_s}"
            )));
        }
        Ok(Self {
            argv,
            timeout: Duration::from_secs_f64(timeout_s),
        })
    }
}

impl EnhancerPlugin for ExternalEnhancer {
    fn name(&self) -> &str {
        "external"
    }

    fn enhance(&self, render: &ImageBuffer, reference: &ImageBuffer) -> Result<ImageBuffer> {
        let dir = tempfile::tempdir()
            .map_err(|e| Error::Enhance(format!("cannot create work directory: {e}")))?;
        let render_path = dir.path().join("render.png");
        let reference_path = dir.path().join("reference.png");
        let out_path = dir.path().join("out.png");
        std::fs::write(&render_path, encode_png(render)?)
            .map_err(|e| Error::Enhance(format!("cannot write render input: {e}")))?;
        write_image(&reference_path, reference)?;

        let mut cmd = std::process::Command::new(&self.argv[0]);
        cmd.args(&self.argv[1..])
            .arg("--render")
            .arg(&render_path)
            .arg("--reference")
            .arg(&reference_path)
            .arg("--out")
            .arg(&out_path)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::piped());
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Enhance(format!("cannot spawn {:?}: {e}", self.argv[0])))?;

        // Drain stderr on a helper thread so a chatty child cannot stall on
        // a full pipe.
        let mut stderr_pipe = child.stderr.take();
        let drain = std::thread::spawn(move || {
            let mut buf = Vec::new();
            if let Some(p) = stderr_pipe.as_mut() {
                let _ = p.read_to_end(&mut buf);
            }
            buf
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        // Not joined: an orphaned grandchild may keep the
                        // stderr pipe open indefinitely.
                        drop(drain);
                        return Err(Error::Enhance(format!(
                            "external enhancer timed out after {:.1} s",
                            self.timeout.as_secs_f64()
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => {
                    let _ = drain.join();
                    return Err(Error::Enhance(format!("wait failed: {e}")));
                }
            }
        };
        let stderr = drain.join().unwrap_or_default();
        if !status.success() {
            return Err(Error::Enhance(format!(
                "external enhancer exited with {status}: {}",
                String::from_utf8_lossy(&stderr).trim()
            )));
        }
        let out = read_image(&out_path)
            .map_err(|e| Error::Enhance(format!("malformed enhancer output: {e}")))?;
        if !out.same_dimensions(render) {
            return Err(Error::Enhance(format!(
                "enhancer output is {}x{} but the render is {}x{}",
                out.width(),
                out.height(),
                render.width(),
                render.height()
            )));
        }
        Ok(out)
    }
}

/// Serializable plugin selection used by pipeline and CLI configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnhancerSpec {
    #[default]
    Identity,
    ColorMatch,
    External {
        command: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<f64>,
    },
}

impl EnhancerSpec {
    pub fn build(&self) -> Result<Box<dyn EnhancerPlugin>> {
        Ok(match self {
            EnhancerSpec::Identity => Box::new(IdentityEnhancer),
            EnhancerSpec::ColorMatch => Box::new(ColorMatchEnhancer),
            EnhancerSpec::External { command, timeout_s } => {
                Box::new(ExternalEnhancer::new(command, *timeout_s)?)
            }
        })
    }
}
