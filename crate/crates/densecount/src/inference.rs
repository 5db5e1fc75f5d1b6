//! Whole-image prediction: fixed-window sliding with overlap averaging, plus
//! the two test-time corrections — response normalization (divide by the mean
//! density mass inside the exemplar boxes when it is implausibly high) and
//! 3×3 crop-and-upscale for images whose exemplars are only a few pixels.

use crate::data::{rescale_sample, DensityMap, ExemplarBox, ImageSample, Provenance, MAX_EXEMPLARS};
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuf;
use crate::model::{CountingModel, TokenGrid};
use serde::{Deserialize, Serialize};

/// Sliding-window geometry and test-time correction thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Square window side in pixels; must match the model input size.
    pub window: usize,
    /// Horizontal step between window origins.
    pub stride: usize,
    /// Normalize the count when the mean exemplar-box mass exceeds this.
    pub ttnorm_threshold: f64,
    /// Crop-and-upscale when any exemplar side is narrower than this.
    pub ttcrop_min_side: f64,
    /// Images are first rescaled to this height, preserving aspect ratio.
    pub resize_height: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 384,
            stride: 128,
            ttnorm_threshold: 1.8,
            ttcrop_min_side: 10.0,
            resize_height: 384,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Invalid("window must be at least 1 pixel".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Invalid(format!(
                "stride {} must lie in [1, window = {}]",
                self.stride, self.window
            )));
        }
        // infinity is allowed: it turns normalization off
        if !(self.ttnorm_threshold > 0.0) {
            return Err(Error::Invalid(format!(
                "ttnorm_threshold must be positive, got {}",
                self.ttnorm_threshold
            )));
        }
        if !(self.ttcrop_min_side > 0.0) {
            return Err(Error::Invalid(format!(
                "ttcrop_min_side must be positive, got {}",
                self.ttcrop_min_side
            )));
        }
        if self.resize_height == 0 {
            return Err(Error::Invalid("resize_height must be at least 1 pixel".into()));
        }
        Ok(())
    }
}

/// Anything that can score one window-sized crop. Side features are encoded
/// separately so exemplars are embedded once per image rather than once per
/// window; tests substitute stub implementations with closed-form output.
pub trait DensityModel {
    type Side;

    /// Native square input size in pixels.
    fn window_size(&self) -> usize;

    /// Encode exemplar boxes drawn on `image`; `None` when `boxes` is empty
    /// (zero-shot).
    fn encode_side(&self, image: &ImageBuf, boxes: &[ExemplarBox]) -> Result<Option<Self::Side>>;

    /// Predicted density for one window-sized crop.
    fn predict_window(&self, window: &ImageBuf, side: Option<&Self::Side>) -> Result<DensityMap>;
}

impl DensityModel for CountingModel {
    type Side = TokenGrid;

    fn window_size(&self) -> usize {
        self.cfg.image_size
    }

    fn encode_side(&self, image: &ImageBuf, boxes: &[ExemplarBox]) -> Result<Option<TokenGrid>> {
        if boxes.is_empty() {
            Ok(None)
        } else {
            self.exemplar_encode(image, boxes).map(Some)
        }
    }

    fn predict_window(&self, window: &ImageBuf, side: Option<&TokenGrid>) -> Result<DensityMap> {
        let tokens = self.vit_encode(window)?;
        let fim = self.fim_forward(&tokens, side)?;
        self.decode_density(&fim)
    }
}

/// Window origins: multiples of `stride` while the window fits, then a final
/// right-aligned window unless the last origin already touches the edge.
fn window_origins(width: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut x = 0;
    while x + window <= width {
        origins.push(x);
        x += stride;
    }
    let tail = width - window;
    if origins.last() != Some(&tail) {
        origins.push(tail);
    }
    origins
}

/// Slide a window-sized crop across the image and average the per-window
/// predictions wherever they overlap. The image height must equal the window;
/// narrower images are right-padded with zeros and the padding's density
/// discarded.
pub fn sliding_window_predict<M: DensityModel>(
    model: &M,
    image: &ImageBuf,
    side: Option<&M::Side>,
    cfg: &InferenceConfig,
) -> Result<DensityMap> {
    cfg.validate()?;
    let window = cfg.window;
    if model.window_size() != window {
        return Err(Error::Invalid(format!(
            "model expects {}-px windows but the configured window is {window}",
            model.window_size()
        )));
    }
    if image.height() != window {
        return Err(Error::shape(
            format!("image height {window}"),
            format!("{}", image.height()),
        ));
    }
    let width = image.width();
    if width < window {
        let padded = image.pad_right(window);
        let pred = model.predict_window(&padded, side)?;
        let mut grid = vec![0.0f64; window * width];
        for r in 0..window {
            for c in 0..width {
                grid[r * width + c] = pred.get(r, c);
            }
        }
        return DensityMap::from_grid(window, width, grid, Provenance::Prediction);
    }

    let origins = window_origins(width, window, cfg.stride);
    let mut acc = vec![0.0f64; window * width];
    let mut coverage = vec![0u32; width];
    for &x0 in &origins {
        let crop = image.crop(0, x0, window, window)?;
        let pred = model.predict_window(&crop, side)?;
        for r in 0..window {
            for c in 0..window {
                acc[r * width + x0 + c] += pred.get(r, c);
            }
        }
        for c in 0..window {
            coverage[x0 + c] += 1;
        }
    }
    for r in 0..window {
        for c in 0..width {
            acc[r * width + c] /= coverage[c] as f64;
        }
    }
    DensityMap::from_grid(window, width, acc, Provenance::Prediction)
}

/// Mean density mass inside the exemplar boxes. Boxes are rasterized onto the
/// half-open integer grid with edges rounded to nearest.
pub fn exemplar_response(density: &DensityMap, boxes: &[ExemplarBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::Invalid("exemplar response needs at least one box".into()));
    }
    let (h, w) = (density.height(), density.width());
    let mut total = 0.0f64;
    for b in boxes {
        let r0 = (b.y1.round().max(0.0) as usize).min(h);
        let r1 = (b.y2.round().max(0.0) as usize).min(h);
        let c0 = (b.x1.round().max(0.0) as usize).min(w);
        let c1 = (b.x2.round().max(0.0) as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                total += density.get(r, c);
            }
        }
    }
    Ok(total / boxes.len() as f64)
}

/// Result of response normalization, surfaced verbatim in the CLI JSON.
#[derive(Debug, Clone, Copy)]
pub struct Normalized {
    pub count: f64,
    pub response: f64,
    pub applied: bool,
}

/// Divide the summed density by the exemplar response when the response is
/// implausibly above 1 object per box; otherwise return the raw sum.
pub fn tt_normalize(density: &DensityMap, boxes: &[ExemplarBox], threshold: f64) -> Result<Normalized> {
    let response = exemplar_response(density, boxes)?;
    let sum = density.sum();
    if response > threshold {
        Ok(Normalized { count: sum / response, response, applied: true })
    } else {
        Ok(Normalized { count: sum, response, applied: false })
    }
}

/// Whether the crop-and-upscale correction fires: any exemplar narrower than
/// the configured minimum side.
pub fn tt_crop_triggered(boxes: &[ExemplarBox], cfg: &InferenceConfig) -> bool {
    !boxes.is_empty() && boxes.iter().any(|b| b.min_side() < cfg.ttcrop_min_side)
}

/// Thirds of `n`: split points [0, n/3, 2n/3, n] in integer arithmetic.
fn split_points(n: usize) -> [usize; 4] {
    [0, n / 3, 2 * n / 3, n]
}

/// Bilinearly resample a density grid to a new shape, then rescale it so the
/// total mass equals `target_sum` (plain resampling does not conserve mass).
fn resample_density(d: &DensityMap, new_h: usize, new_w: usize, target_sum: f64) -> DensityMap {
    let (h, w) = (d.height(), d.width());
    let sr = h as f64 / new_h as f64;
    let sc = w as f64 / new_w as f64;
    let mut grid = vec![0.0f64; new_h * new_w];
    for r in 0..new_h {
        let src_r = (r as f64 + 0.5) * sr - 0.5;
        let r0 = src_r.floor();
        let fr = src_r - r0;
        let ri0 = (r0.max(0.0) as usize).min(h - 1);
        let ri1 = ((r0 + 1.0).max(0.0) as usize).min(h - 1);
        for c in 0..new_w {
            let src_c = (c as f64 + 0.5) * sc - 0.5;
            let c0 = src_c.floor();
            let fc = src_c - c0;
            let ci0 = (c0.max(0.0) as usize).min(w - 1);
            let ci1 = ((c0 + 1.0).max(0.0) as usize).min(w - 1);
            let top = d.get(ri0, ci0) * (1.0 - fc) + d.get(ri0, ci1) * fc;
            let bot = d.get(ri1, ci0) * (1.0 - fc) + d.get(ri1, ci1) * fc;
            grid[r * new_w + c] = top * (1.0 - fr) + bot * fr;
        }
    }
    let current: f64 = grid.iter().sum();
    if current.abs() > 1e-18 {
        let k = target_sum / current;
        for v in &mut grid {
            *v *= k;
        }
    } else if target_sum != 0.0 {
        let fill = target_sum / (new_h * new_w) as f64;
        for v in &mut grid {
            *v = fill;
        }
    }
    DensityMap::from_grid(new_h, new_w, grid, Provenance::Prediction)
        .expect("grid built to shape")
}

/// Split the image into nine equal pieces, upscale each back to the full
/// pre-split size, run the sliding pipeline per piece and sum the nine
/// counts. Boxes are remapped into upscaled-piece coordinates; pieces that
/// contain no complete box skip normalization. Returns the total, a density
/// map reassembled at the input size (its mass equals the total), and
/// whether any piece was normalized.
pub fn tt_crop_predict<M: DensityModel>(
    model: &M,
    image: &ImageBuf,
    boxes: &[ExemplarBox],
    side: Option<&M::Side>,
    cfg: &InferenceConfig,
) -> Result<(f64, DensityMap, bool)> {
    let (h, w) = (image.height(), image.width());
    if h < 3 || w < 3 {
        return Err(Error::Invalid(format!(
            "{h}x{w} image is too small for a 3x3 split"
        )));
    }
    let ys = split_points(h);
    let xs = split_points(w);
    let mut total = 0.0f64;
    let mut any_normalized = false;
    let mut assembled = DensityMap::zeros(h, w, Provenance::Prediction);
    for i in 0..3 {
        for j in 0..3 {
            let (y0, y1) = (ys[i], ys[i + 1]);
            let (x0, x1) = (xs[j], xs[j + 1]);
            let (ph, pw) = (y1 - y0, x1 - x0);
            let piece = image.crop(y0, x0, ph, pw)?.resize(h, w);
            let sy = h as f64 / ph as f64;
            let sx = w as f64 / pw as f64;
            let local: Vec<ExemplarBox> = boxes
                .iter()
                .filter(|b| {
                    b.y1 >= y0 as f64 && b.y2 <= y1 as f64 && b.x1 >= x0 as f64 && b.x2 <= x1 as f64
                })
                .map(|b| ExemplarBox {
                    y1: (b.y1 - y0 as f64) * sy,
                    x1: (b.x1 - x0 as f64) * sx,
                    y2: (b.y2 - y0 as f64) * sy,
                    x2: (b.x2 - x0 as f64) * sx,
                })
                .collect();
            let density = sliding_window_predict(model, &piece, side, cfg)?;
            let count = if local.is_empty() {
                density.sum()
            } else {
                let norm = tt_normalize(&density, &local, cfg.ttnorm_threshold)?;
                any_normalized |= norm.applied;
                norm.count
            };
            total += count;
            let back = resample_density(&density, ph, pw, count);
            for r in 0..ph {
                for c in 0..pw {
                    assembled.add(y0 + r, x0 + c, back.get(r, c));
                }
            }
        }
    }
    Ok((total, assembled, any_normalized))
}

/// Rescale a sample to the working resolution: height fixed, aspect
/// preserved. Annotations follow the same scaling. The returned image's
/// dimensions match the density map that `predict_count` produces.
pub fn rescale_for_inference(sample: &ImageSample, cfg: &InferenceConfig) -> Result<ImageSample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let scale = cfg.resize_height as f64 / h as f64;
    let new_w = ((w as f64 * scale).round() as usize).max(1);
    rescale_sample(sample, cfg.resize_height, new_w)
}

/// Everything one full-image prediction reports.
#[derive(Debug, Clone)]
pub struct PredictOutcome {
    pub count: f64,
    /// Density at the rescaled working resolution; sums to `count`.
    pub density: DensityMap,
    /// Mean exemplar-box mass, when exemplars were used on the plain path.
    pub response: Option<f64>,
    pub ttnorm_applied: bool,
    pub ttcrop_applied: bool,
}

/// Full pipeline for one sample: rescale to the working height, route through
/// crop-and-upscale when the exemplars are tiny, otherwise slide directly;
/// normalize by the exemplar response unless running zero-shot.
pub fn predict_count<M: DensityModel>(
    model: &M,
    sample: &ImageSample,
    shots: usize,
    cfg: &InferenceConfig,
) -> Result<PredictOutcome> {
    cfg.validate()?;
    if shots > MAX_EXEMPLARS {
        return Err(Error::Invalid(format!(
            "shots = {shots} exceeds the {MAX_EXEMPLARS}-exemplar maximum"
        )));
    }
    if shots > sample.exemplars.len() {
        return Err(Error::Invalid(format!(
            "requested {shots} shots but sample \"{}\" provides {}",
            sample.id,
            sample.exemplars.len()
        )));
    }
    let scaled = rescale_for_inference(sample, cfg)?;
    let boxes = &scaled.exemplars[..shots];
    let side = model.encode_side(&scaled.image, boxes)?;

    if shots >= 1 && tt_crop_triggered(boxes, cfg) {
        let (count, density, any_norm) = tt_crop_predict(model, &scaled.image, boxes, side.as_ref(), cfg)?;
        return Ok(PredictOutcome {
            count,
            density,
            response: None,
            ttnorm_applied: any_norm,
            ttcrop_applied: true,
        });
    }

    let density = sliding_window_predict(model, &scaled.image, side.as_ref(), cfg)?;
    if shots >= 1 {
        let norm = tt_normalize(&density, boxes, cfg.ttnorm_threshold)?;
        let density = if norm.applied {
            let grid: Vec<f64> = density.grid().iter().map(|v| v / norm.response).collect();
            DensityMap::from_grid(density.height(), density.width(), grid, Provenance::Prediction)?
        } else {
            density
        };
        Ok(PredictOutcome {
            count: norm.count,
            density,
            response: Some(norm.response),
            ttnorm_applied: norm.applied,
            ttcrop_applied: false,
        })
    } else {
        Ok(PredictOutcome {
            count: density.sum(),
            density,
            response: None,
            ttnorm_applied: false,
            ttcrop_applied: false,
        })
    }
}
