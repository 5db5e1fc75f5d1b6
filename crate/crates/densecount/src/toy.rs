//! Self-contained synthetic corpus: small images of simple shapes with exact
//! dot annotations, exemplar boxes around the first three objects, and
//! split-disjoint class labels. Used by smoke tests and the `make-toy-data`
//! command so the full pipeline can run without any external dataset.

use crate::data::{DotAnnotation, ExemplarBox, ImageSample, Split};
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuf;
use crate::rng::substream_indexed;
use rand::Rng;
use serde_json::{json, Map, Value};
use std::path::Path;

/// Size and composition of the generated corpus.
#[derive(Debug, Clone)]
pub struct ToyDataConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Images per split.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Inclusive range of objects per image; at least 3 so every sample
    /// supports 3-shot evaluation.
    pub objects: (usize, usize),
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train: 12,
            val: 4,
            test: 4,
            objects: (4, 10),
            seed: 0,
        }
    }
}

impl ToyDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Invalid(format!(
                "toy images need at least 32 px per side, got {}",
                self.image_size
            )));
        }
        let (lo, hi) = self.objects;
        if lo < 3 || lo > hi {
            return Err(Error::Invalid(format!(
                "object range ({lo}, {hi}) must satisfy 3 <= lo <= hi"
            )));
        }
        if hi > self.image_size * self.image_size / 64 {
            return Err(Error::Invalid(format!(
                "{hi} objects will not fit a {0}x{0} image",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
}

/// Split-disjoint class palette; train holds four distinct classes so
/// four-class mosaics are constructible.
fn classes(split: Split) -> &'static [(&'static str, Shape, [f32; 3])] {
    match split {
        Split::Train => &[
            ("disk-red", Shape::Disk, [0.9, 0.2, 0.15]),
            ("disk-blue", Shape::Disk, [0.2, 0.35, 0.9]),
            ("square-green", Shape::Square, [0.15, 0.8, 0.3]),
            ("square-gold", Shape::Square, [0.85, 0.7, 0.1]),
        ],
        Split::Val => &[("disk-cyan", Shape::Disk, [0.1, 0.8, 0.85])],
        Split::Test => &[("square-violet", Shape::Square, [0.6, 0.25, 0.85])],
    }
}

fn render_object(img: &mut ImageBuf, cy: f64, cx: f64, r: f64, shape: Shape, color: [f32; 3]) {
    let (h, w) = (img.height(), img.width());
    let r0 = ((cy - r).floor().max(0.0)) as usize;
    let r1 = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
    let c0 = ((cx - r).floor().max(0.0)) as usize;
    let c1 = ((cx + r).ceil().min(w as f64 - 1.0)) as usize;
    for row in r0..=r1 {
        for col in c0..=c1 {
            let dy = row as f64 - cy;
            let dx = col as f64 - cx;
            let inside = match shape {
                Shape::Disk => dy * dy + dx * dx <= r * r,
                Shape::Square => dy.abs() <= r && dx.abs() <= r,
            };
            if inside {
                // mild radial shading so the interior is not flat
                let t = 1.0 - 0.3 * ((dy * dy + dx * dx) / (r * r)).min(1.0) as f32;
                let mut px = img.get(row, col);
                for ch in 0..3 {
                    px[ch] = (color[ch] * t).clamp(0.0, 1.0);
                }
                img.put(row, col, px);
            }
        }
    }
}

fn generate_one(cfg: &ToyDataConfig, split: Split, index: u64, id: String) -> ImageSample {
    let mut rng = substream_indexed(cfg.seed, "toy", index);
    let size = cfg.image_size;
    let palette = classes(split);
    let (class, shape, color) = palette[rng.gen_range(0..palette.len())];
    // dim noise background
    let mut image = ImageBuf::new(size, size);
    for row in 0..size {
        for col in 0..size {
            let v = rng.gen_range(0.0f32..0.18);
            image.put(row, col, [v, v * 0.9, v * 1.1]);
        }
    }
    let n = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let mut dots = Vec::with_capacity(n);
    let mut radii = Vec::with_capacity(n);
    for _ in 0..n {
        // radius >= 4 keeps exemplar boxes at least 10 px per side
        let r = rng.gen_range(4.0f64..7.0);
        let cy = rng.gen_range(r + 1.0..size as f64 - r - 1.0);
        let cx = rng.gen_range(r + 1.0..size as f64 - r - 1.0);
        render_object(&mut image, cy, cx, r, shape, color);
        dots.push(DotAnnotation::new(cx, cy));
        radii.push(r);
    }
    let exemplars = dots
        .iter()
        .zip(&radii)
        .take(3)
        .map(|(d, &r)| {
            let b = r + 1.0;
            ExemplarBox::new(d.y - b, d.x - b, d.y + b, d.x + b)
                .expect("positive box side")
                .clamped(size, size)
                .expect("box intersects the image")
        })
        .collect();
    ImageSample {
        id,
        image,
        dots,
        exemplars,
        class_label: class.to_owned(),
        split,
    }
}

/// Generate the corpus in memory, deterministically from the seed.
pub fn generate_toy_samples(cfg: &ToyDataConfig) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut index = 0u64;
    for (split, n, tag) in [
        (Split::Train, cfg.train, "train"),
        (Split::Val, cfg.val, "val"),
        (Split::Test, cfg.test, "test"),
    ] {
        for i in 0..n {
            samples.push(generate_one(cfg, split, index, format!("{tag}_{i:03}.png")));
            index += 1;
        }
    }
    Ok(samples)
}

/// Write the corpus to disk in the ingestion layout: `images/*.png`,
/// `annotations.json` and `splits.json` under `out_dir`. Returns the number
/// of images written.
pub fn write_toy_dataset(cfg: &ToyDataConfig, out_dir: &Path) -> Result<usize> {
    let samples = generate_toy_samples(cfg)?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut annotations = Map::new();
    let mut splits: [(&str, Vec<String>); 3] =
        [("train", Vec::new()), ("val", Vec::new()), ("test", Vec::new())];
    for s in &samples {
        s.image.save_png(&images_dir.join(&s.id))?;
        let points: Vec<Value> = s.dots.iter().map(|d| json!([d.x, d.y])).collect();
        let boxes: Vec<Value> = s
            .exemplars
            .iter()
            .map(|b| json!([b.y1, b.x1, b.y2, b.x2]))
            .collect();
        annotations.insert(
            s.id.clone(),
            json!({"points": points, "boxes": boxes, "class": s.class_label}),
        );
        let slot = match s.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        splits[slot].1.push(s.id.clone());
    }
    let ann_path = out_dir.join("annotations.json");
    let ann_text = serde_json::to_string_pretty(&Value::Object(annotations))
        .map_err(|e| Error::Invalid(format!("annotation serialization: {e}")))?;
    std::fs::write(&ann_path, ann_text).map_err(|e| Error::io(&ann_path, e))?;
    let split_map: Map<String, Value> = splits
        .into_iter()
        .map(|(k, v)| (k.to_owned(), json!(v)))
        .collect();
    let split_path = out_dir.join("splits.json");
    let split_text = serde_json::to_string_pretty(&Value::Object(split_map))
        .map_err(|e| Error::Invalid(format!("split serialization: {e}")))?;
    std::fs::write(&split_path, split_text).map_err(|e| Error::io(&split_path, e))?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{check_class_disjointness, load_annotations, SplitFile};

    #[test]
    fn corpus_is_deterministic_and_valid() {
        let cfg = ToyDataConfig::default();
        let a = generate_toy_samples(&cfg).unwrap();
        let b = generate_toy_samples(&cfg).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.dots.len(), y.dots.len());
            assert_eq!(x.image.data(), y.image.data());
        }
        for s in &a {
            s.validate().unwrap();
            assert!(s.shots() == 3, "{} has {} boxes", s.id, s.shots());
            assert!(s.count() >= 4 && s.count() <= 10);
        }
        check_class_disjointness(&a).unwrap();
    }

    #[test]
    fn exemplar_boxes_avoid_the_tiny_side_trigger() {
        let samples = generate_toy_samples(&ToyDataConfig::default()).unwrap();
        for s in &samples {
            for b in &s.exemplars {
                assert!(b.min_side() >= 10.0, "{}: {}", s.id, b.min_side());
            }
        }
    }

    #[test]
    fn train_split_offers_four_distinct_classes() {
        let cfg = ToyDataConfig { train: 40, ..Default::default() };
        let samples = generate_toy_samples(&cfg).unwrap();
        let classes: std::collections::BTreeSet<_> = samples
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.class_label.clone())
            .collect();
        assert_eq!(classes.len(), 4);
    }

    #[test]
    fn written_dataset_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyDataConfig { train: 3, val: 2, test: 2, ..Default::default() };
        let n = write_toy_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(n, 7);
        let splits = SplitFile::load(&dir.path().join("splits.json")).unwrap();
        let out = load_annotations(
            &dir.path().join("annotations.json"),
            &dir.path().join("images"),
            &splits,
        )
        .unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        assert_eq!(out.samples.len(), 7);
        let generated = generate_toy_samples(&cfg).unwrap();
        for (disk, mem) in out.samples.iter().zip(&generated) {
            assert_eq!(disk.id, mem.id);
            assert_eq!(disk.count(), mem.count());
            assert_eq!(disk.shots(), mem.shots());
            assert_eq!(disk.split, mem.split);
            // PNG quantizes to 1/255 steps
            for (a, b) in disk.image.data().iter().zip(mem.image.data()) {
                assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = ToyDataConfig { image_size: 16, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ToyDataConfig { objects: (2, 5), ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ToyDataConfig { objects: (6, 5), ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
