//! Density-map visualization: a hot-colormap heatmap alpha-blended over the
//! source image, for qualitative inspection of predictions.

use crate::data::DensityMap;
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuf;
use std::path::Path;

/// Classic "hot" ramp: black → red → yellow → white over t ∈ [0, 1].
fn hot(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (3.0 * t).clamp(0.0, 1.0),
        (3.0 * t - 1.0).clamp(0.0, 1.0),
        (3.0 * t - 2.0).clamp(0.0, 1.0),
    ]
}

/// Blend the min-max-normalized density over the image at α = 0.5. A constant
/// (e.g. all-zero) density normalizes to 0 everywhere, so the output is the
/// image dimmed toward black.
pub fn overlay_image(image: &ImageBuf, density: &DensityMap) -> Result<ImageBuf> {
    if image.height() != density.height() || image.width() != density.width() {
        return Err(Error::shape(
            format!("{}x{} density", image.height(), image.width()),
            format!("{}x{}", density.height(), density.width()),
        ));
    }
    let lo = density.grid().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = density.grid().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(ImageBuf::from_fn(image.height(), image.width(), |r, c| {
        let t = if range > 0.0 {
            ((density.get(r, c) - lo) / range) as f32
        } else {
            0.0
        };
        let heat = hot(t);
        let px = image.get(r, c);
        [
            0.5 * px[0] + 0.5 * heat[0],
            0.5 * px[1] + 0.5 * heat[1],
            0.5 * px[2] + 0.5 * heat[2],
        ]
    }))
}

/// Render the overlay and write it as a PNG.
pub fn render_overlay(image: &ImageBuf, density: &DensityMap, out_path: &Path) -> Result<()> {
    overlay_image(image, density)?.save_png(out_path)
}
