//! Training-time augmentation. Geometric transforms move the image, the
//! density grid, the dots and the boxes through the same pixel permutation,
//! so the ground-truth count is bit-preserved; photometric transforms touch
//! only the image.

use crate::data::{DensityMap, DotAnnotation, ExemplarBox, Provenance};
use crate::error::Result;
use crate::imgbuf::ImageBuf;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentToggles {
    pub noise: bool,
    pub blur: bool,
    pub hflip: bool,
    pub color_jitter: bool,
    pub geometric: bool,
}

impl Default for AugmentToggles {
    fn default() -> Self {
        Self {
            noise: true,
            blur: true,
            hflip: true,
            color_jitter: true,
            geometric: true,
        }
    }
}

impl AugmentToggles {
    pub fn none() -> Self {
        Self {
            noise: false,
            blur: false,
            hflip: false,
            color_jitter: false,
            geometric: false,
        }
    }
}

/// One fine-tuning unit: image, its ground-truth density grid and the
/// annotations that generated it.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: ImageBuf,
    pub density: DensityMap,
    pub dots: Vec<DotAnnotation>,
    pub boxes: Vec<ExemplarBox>,
}

fn flip_grid(d: &DensityMap) -> DensityMap {
    let (h, w) = (d.height(), d.width());
    let mut g = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            g[r * w + c] = d.get(r, w - 1 - c);
        }
    }
    DensityMap::from_grid(h, w, g, Provenance::GroundTruth).expect("same-size grid")
}

fn rot_grid(d: &DensityMap, k: usize) -> DensityMap {
    let (h, w) = (d.height(), d.width());
    match k % 4 {
        0 => d.clone(),
        1 => {
            let mut g = vec![0.0; h * w];
            for r in 0..w {
                for c in 0..h {
                    g[r * h + c] = d.get(c, w - 1 - r);
                }
            }
            DensityMap::from_grid(w, h, g, Provenance::GroundTruth).expect("transposed grid")
        }
        2 => {
            let mut g = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    g[r * w + c] = d.get(h - 1 - r, w - 1 - c);
                }
            }
            DensityMap::from_grid(h, w, g, Provenance::GroundTruth).expect("same-size grid")
        }
        _ => {
            let mut g = vec![0.0; h * w];
            for r in 0..w {
                for c in 0..h {
                    g[r * h + c] = d.get(h - 1 - c, r);
                }
            }
            DensityMap::from_grid(w, h, g, Provenance::GroundTruth).expect("transposed grid")
        }
    }
}

fn clamp_coord(v: f64, limit: usize) -> f64 {
    v.clamp(0.0, limit as f64 - 1e-6)
}

// Dots rasterize at integer pixel coordinates, so their exact mirror is
// x -> (W-1)-x; boxes are area crops sampled with the align-half convention,
// whose exact mirror is [x1, x2) -> [W-x2, W-x1).
fn flip_dots(dots: &[DotAnnotation], w: usize) -> Vec<DotAnnotation> {
    dots.iter()
        .map(|d| DotAnnotation::new(clamp_coord(w as f64 - 1.0 - d.x, w), d.y))
        .collect()
}

fn flip_boxes(boxes: &[ExemplarBox], w: usize) -> Vec<ExemplarBox> {
    boxes
        .iter()
        .map(|b| ExemplarBox {
            y1: b.y1,
            x1: w as f64 - b.x2,
            y2: b.y2,
            x2: w as f64 - b.x1,
        })
        .collect()
}

/// Counter-clockwise quarter turns matching [`ImageBuf::rot90`]: for k=1 a
/// point (y, x) maps to (W−1−x, y).
fn rot_dots(dots: &[DotAnnotation], h: usize, w: usize, k: usize) -> Vec<DotAnnotation> {
    dots.iter()
        .map(|d| match k % 4 {
            0 => *d,
            1 => DotAnnotation::new(clamp_coord(d.y, h), clamp_coord(w as f64 - 1.0 - d.x, w)),
            2 => DotAnnotation::new(
                clamp_coord(w as f64 - 1.0 - d.x, w),
                clamp_coord(h as f64 - 1.0 - d.y, h),
            ),
            _ => DotAnnotation::new(clamp_coord(h as f64 - 1.0 - d.y, h), clamp_coord(d.x, w)),
        })
        .collect()
}

fn rot_boxes(boxes: &[ExemplarBox], h: usize, w: usize, k: usize) -> Vec<ExemplarBox> {
    boxes
        .iter()
        .map(|b| match k % 4 {
            0 => *b,
            1 => ExemplarBox { y1: w as f64 - b.x2, x1: b.y1, y2: w as f64 - b.x1, x2: b.y2 },
            2 => ExemplarBox {
                y1: h as f64 - b.y2,
                x1: w as f64 - b.x2,
                y2: h as f64 - b.y1,
                x2: w as f64 - b.x1,
            },
            _ => ExemplarBox { y1: b.x1, x1: h as f64 - b.y2, y2: b.x2, x2: h as f64 - b.y1 },
        })
        .collect()
}

fn gaussian_noise(img: &ImageBuf, rng: &mut impl Rng, std: f32) -> ImageBuf {
    ImageBuf::from_fn(img.height(), img.width(), |r, c| {
        let px = img.get(r, c);
        let mut out = [0f32; 3];
        for ch in 0..3 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            out[ch] = (px[ch] + std * z as f32).clamp(0.0, 1.0);
        }
        out
    })
}

fn blur3(img: &ImageBuf) -> ImageBuf {
    // separable [1, 2, 1]/4 with replicated edges
    let (h, w) = (img.height(), img.width());
    let horiz = ImageBuf::from_fn(h, w, |r, c| {
        let l = img.get(r, c.saturating_sub(1));
        let m = img.get(r, c);
        let rr = img.get(r, (c + 1).min(w - 1));
        [
            0.25 * l[0] + 0.5 * m[0] + 0.25 * rr[0],
            0.25 * l[1] + 0.5 * m[1] + 0.25 * rr[1],
            0.25 * l[2] + 0.5 * m[2] + 0.25 * rr[2],
        ]
    });
    ImageBuf::from_fn(h, w, |r, c| {
        let u = horiz.get(r.saturating_sub(1), c);
        let m = horiz.get(r, c);
        let d = horiz.get((r + 1).min(h - 1), c);
        [
            0.25 * u[0] + 0.5 * m[0] + 0.25 * d[0],
            0.25 * u[1] + 0.5 * m[1] + 0.25 * d[1],
            0.25 * u[2] + 0.5 * m[2] + 0.25 * d[2],
        ]
    })
}

fn color_jitter(img: &ImageBuf, rng: &mut impl Rng) -> ImageBuf {
    let gain: [f32; 3] = [
        rng.gen_range(0.8..1.2),
        rng.gen_range(0.8..1.2),
        rng.gen_range(0.8..1.2),
    ];
    let offset: f32 = rng.gen_range(-0.1..0.1);
    ImageBuf::from_fn(img.height(), img.width(), |r, c| {
        let px = img.get(r, c);
        [
            (px[0] * gain[0] + offset).clamp(0.0, 1.0),
            (px[1] * gain[1] + offset).clamp(0.0, 1.0),
            (px[2] * gain[2] + offset).clamp(0.0, 1.0),
        ]
    })
}

/// Apply the enabled augmentations with magnitudes drawn from `rng`.
/// Quarter-turn rotations are only sampled for square images.
pub fn augment_sample(ex: &TrainExample, toggles: &AugmentToggles, rng: &mut impl Rng) -> Result<TrainExample> {
    let mut out = ex.clone();
    if toggles.hflip && rng.gen_bool(0.5) {
        let w = out.image.width();
        out.image = out.image.hflip();
        out.density = flip_grid(&out.density);
        out.dots = flip_dots(&out.dots, w);
        out.boxes = flip_boxes(&out.boxes, w);
    }
    if toggles.geometric && out.image.height() == out.image.width() {
        let k = rng.gen_range(0..4usize);
        if k > 0 {
            let (h, w) = (out.image.height(), out.image.width());
            out.image = out.image.rot90(k);
            out.density = rot_grid(&out.density, k);
            out.dots = rot_dots(&out.dots, h, w, k);
            out.boxes = rot_boxes(&out.boxes, h, w, k);
        }
    }
    if toggles.color_jitter {
        out.image = color_jitter(&out.image, rng);
    }
    if toggles.blur && rng.gen_bool(0.3) {
        out.image = blur3(&out.image);
    }
    if toggles.noise && rng.gen_bool(0.5) {
        out.image = gaussian_noise(&out.image, rng, 0.02);
    }
    Ok(out)
}
