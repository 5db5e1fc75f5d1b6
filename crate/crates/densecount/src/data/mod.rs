//! Dataset representation: dot-annotated images with exemplar boxes, and the
//! density-map ground truth derived from them.

mod annotations;
mod density;

pub use annotations::{load_annotations, parse_annotation_doc, AnnotationEntry, LoadOutcome, SampleError, SplitFile};
pub use density::{generate_density_map, read_dmap, write_dmap, DensityMap, Provenance};

use crate::error::{Error, Result};
use crate::imgbuf::ImageBuf;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Maximum number of exemplar boxes kept per sample.
pub const MAX_EXEMPLARS: usize = 3;

/// A single object-center annotation, in pixel coordinates.
///
/// `x` runs along image width (columns), `y` along height (rows). A valid dot
/// satisfies `0 <= x < W` and `0 <= y < H` for its owning image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DotAnnotation {
    pub x: f64,
    pub y: f64,
}

impl DotAnnotation {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.x < width as f64 && self.y >= 0.0 && self.y < height as f64
    }
}

/// An axis-aligned exemplar bounding box `(y1, x1, y2, x2)` with `y1 < y2`,
/// `x1 < x2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBox {
    pub y1: f64,
    pub x1: f64,
    pub y2: f64,
    pub x2: f64,
}

impl ExemplarBox {
    pub fn new(y1: f64, x1: f64, y2: f64, x2: f64) -> Result<Self> {
        if !(y1 < y2 && x1 < x2) {
            return Err(Error::Invalid(format!(
                "degenerate exemplar box ({y1}, {x1}, {y2}, {x2})"
            )));
        }
        Ok(Self { y1, x1, y2, x2 })
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn min_side(&self) -> f64 {
        self.height().min(self.width())
    }

    /// Clamp the box into `[0, H] x [0, W]`; returns None if it degenerates.
    pub fn clamped(&self, height: usize, width: usize) -> Option<Self> {
        let y1 = self.y1.max(0.0);
        let x1 = self.x1.max(0.0);
        let y2 = self.y2.min(height as f64);
        let x2 = self.x2.min(width as f64);
        (y1 < y2 && x1 < x2).then_some(Self { y1, x1, y2, x2 })
    }

    pub fn scaled(&self, sy: f64, sx: f64) -> Self {
        Self {
            y1: self.y1 * sy,
            x1: self.x1 * sx,
            y2: self.y2 * sy,
            x2: self.x2 * sx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split \"{other}\""))),
        }
    }
}

/// An annotated image: pixels, object-center dots, up to three exemplar
/// boxes, a class label and the split it belongs to.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub image: ImageBuf,
    pub dots: Vec<DotAnnotation>,
    pub exemplars: Vec<ExemplarBox>,
    pub class_label: String,
    pub split: Split,
}

impl ImageSample {
    /// Number of exemplar shots available (K).
    pub fn shots(&self) -> usize {
        self.exemplars.len()
    }

    /// Ground-truth object count.
    pub fn count(&self) -> usize {
        self.dots.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        for d in &self.dots {
            if !d.in_bounds(h, w) {
                return Err(Error::Invalid(format!(
                    "dot ({}, {}) outside {}x{} image \"{}\"",
                    d.x, d.y, h, w, self.id
                )));
            }
        }
        if self.exemplars.len() > MAX_EXEMPLARS {
            return Err(Error::Invalid(format!(
                "sample \"{}\" carries {} exemplars (max {})",
                self.id,
                self.exemplars.len(),
                MAX_EXEMPLARS
            )));
        }
        Ok(())
    }
}

/// Resize a sample to `(new_h, new_w)`, rescaling dot and box coordinates by
/// the same linear map as the pixels. The dot count never changes.
pub fn rescale_sample(sample: &ImageSample, new_h: usize, new_w: usize) -> Result<ImageSample> {
    if new_h < 16 || new_w < 16 {
        return Err(Error::Invalid(format!(
            "rescale target {new_h}x{new_w} below the 16 px minimum"
        )));
    }
    let (h, w) = (sample.image.height(), sample.image.width());
    let sy = new_h as f64 / h as f64;
    let sx = new_w as f64 / w as f64;
    let dots = sample
        .dots
        .iter()
        .map(|d| DotAnnotation {
            // keep the half-open bound after floating-point scaling
            x: (d.x * sx).min(new_w as f64 - 1e-6),
            y: (d.y * sy).min(new_h as f64 - 1e-6),
        })
        .collect();
    let exemplars = sample
        .exemplars
        .iter()
        .filter_map(|b| b.scaled(sy, sx).clamped(new_h, new_w))
        .collect();
    Ok(ImageSample {
        id: sample.id.clone(),
        image: sample.image.resize(new_h, new_w),
        dots,
        exemplars,
        class_label: sample.class_label.clone(),
        split: sample.split,
    })
}

/// Class labels present per split. Train and test must be disjoint for
/// open-set counting data.
pub fn class_sets(samples: &[ImageSample]) -> [BTreeSet<String>; 3] {
    let mut sets: [BTreeSet<String>; 3] = Default::default();
    for s in samples {
        let idx = match s.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        sets[idx].insert(s.class_label.clone());
    }
    sets
}

/// Verify the open-set property: train classes never appear in val or test.
pub fn check_class_disjointness(samples: &[ImageSample]) -> Result<()> {
    let [train, val, test] = class_sets(samples);
    for (name, other) in [("val", &val), ("test", &test)] {
        let overlap: Vec<_> = train.intersection(other).cloned().collect();
        if !overlap.is_empty() {
            return Err(Error::Invalid(format!(
                "train and {name} share classes: {overlap:?}"
            )));
        }
    }
    Ok(())
}
