//! Hybrid novel-view-synthesis pipeline: fit a Gaussian-splat scene from
//! posed source images, render held-out target views, enhance the renders
//! against reference source frames, optionally refine the scene along
//! interpolated camera paths, and score results.

pub mod camera;
pub mod colmap;
pub mod dataset;
pub mod enhance;
pub mod error;
pub mod fit;
pub mod image;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod splat;

pub use error::{Error, Result};

/// Caps the global worker pool. Results never depend on the thread count;
/// this only bounds parallelism. Callable once, before any parallel work.
pub fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("cannot configure thread pool: {e}")))
}
