//! Annotation ingestion.
//!
//! The annotation document is a JSON object mapping image filename to
//! `{points: [[x, y], ...], boxes: [...], class: "label"}`. Box entries come
//! in two layouts: a flat `[y1, x1, y2, x2]` quadruple, or four `[x, y]`
//! corner points as published in FSC-147-style data; corners are reduced to
//! an axis-aligned box by min/max. A separate split file maps each split name
//! to its filename list.

use crate::data::{DotAnnotation, ExemplarBox, ImageSample, Split, MAX_EXEMPLARS};
use crate::error::{Error, Result};
use crate::imgbuf::ImageBuf;
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// One parsed annotation entry, before the image is loaded.
#[derive(Debug, Clone)]
pub struct AnnotationEntry {
    pub points: Vec<DotAnnotation>,
    pub boxes: Vec<ExemplarBox>,
    pub class: String,
}

/// Split-name -> filename list, read from a JSON document like
/// `{"train": [...], "val": [...], "test": [...]}`.
#[derive(Debug, Clone, Default)]
pub struct SplitFile {
    pub lists: BTreeMap<Split, Vec<String>>,
}

impl SplitFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Invalid(format!("{}: split file must be a JSON object", path.display())))?;
        let mut lists = BTreeMap::new();
        for (k, v) in obj {
            let split: Split = k.parse()?;
            let files = v
                .as_array()
                .ok_or_else(|| Error::Invalid(format!("split \"{k}\" is not an array")))?
                .iter()
                .map(|f| {
                    f.as_str()
                        .map(str::to_owned)
                        .ok_or_else(|| Error::Invalid(format!("split \"{k}\" holds a non-string entry")))
                })
                .collect::<Result<Vec<_>>>()?;
            lists.insert(split, files);
        }
        Ok(Self { lists })
    }

    pub fn files(&self, split: Split) -> &[String] {
        self.lists.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A per-sample ingestion failure that does not abort the whole load.
#[derive(Debug, Clone)]
pub struct SampleError {
    pub id: String,
    pub reason: String,
}

/// The result of loading a dataset: usable samples plus per-sample failures.
#[derive(Debug, Clone, Default)]
pub struct LoadOutcome {
    pub samples: Vec<ImageSample>,
    pub errors: Vec<SampleError>,
}

impl LoadOutcome {
    pub fn for_split(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

fn parse_number(v: &Value, key: &str, what: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::Annotation {
        key: key.to_owned(),
        msg: format!("{what} is not a number"),
    })
}

fn parse_point(v: &Value, key: &str) -> Result<DotAnnotation> {
    let arr = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::Annotation {
        key: key.to_owned(),
        msg: "point is not an [x, y] pair".into(),
    })?;
    Ok(DotAnnotation::new(
        parse_number(&arr[0], key, "point x")?,
        parse_number(&arr[1], key, "point y")?,
    ))
}

fn parse_box(v: &Value, key: &str) -> Result<ExemplarBox> {
    let arr = v.as_array().ok_or_else(|| Error::Annotation {
        key: key.to_owned(),
        msg: "box is not an array".into(),
    })?;
    // flat [y1, x1, y2, x2]
    if arr.len() == 4 && arr.iter().all(Value::is_number) {
        let y1 = parse_number(&arr[0], key, "box y1")?;
        let x1 = parse_number(&arr[1], key, "box x1")?;
        let y2 = parse_number(&arr[2], key, "box y2")?;
        let x2 = parse_number(&arr[3], key, "box x2")?;
        return ExemplarBox::new(y1, x1, y2, x2).map_err(|e| Error::Annotation {
            key: key.to_owned(),
            msg: e.to_string(),
        });
    }
    // four [x, y] corner points; reduce by min/max
    if arr.len() == 4 && arr.iter().all(Value::is_array) {
        let corners = arr.iter().map(|c| parse_point(c, key)).collect::<Result<Vec<_>>>()?;
        let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
        let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in &corners {
            x1 = x1.min(c.x);
            y1 = y1.min(c.y);
            x2 = x2.max(c.x);
            y2 = y2.max(c.y);
        }
        return ExemplarBox::new(y1, x1, y2, x2).map_err(|e| Error::Annotation {
            key: key.to_owned(),
            msg: e.to_string(),
        });
    }
    Err(Error::Annotation {
        key: key.to_owned(),
        msg: "box must be [y1,x1,y2,x2] or four [x,y] corners".into(),
    })
}

/// Parse the annotation document into per-file entries. Malformed entries are
/// fatal and name the offending key.
pub fn parse_annotation_doc(path: &Path) -> Result<BTreeMap<String, AnnotationEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Invalid(format!("{}: annotation document must be a JSON object", path.display())))?;
    let mut entries = BTreeMap::new();
    for (key, v) in obj {
        let entry = v.as_object().ok_or_else(|| Error::Annotation {
            key: key.clone(),
            msg: "entry is not an object".into(),
        })?;
        let points = entry
            .get("points")
            .and_then(Value::as_array)
            .map(|pts| pts.iter().map(|p| parse_point(p, key)).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        let boxes = entry
            .get("boxes")
            .and_then(Value::as_array)
            .map(|bs| bs.iter().map(|b| parse_box(b, key)).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        let class = entry
            .get("class")
            .and_then(Value::as_str)
            .unwrap_or("unknown")
            .to_owned();
        entries.insert(
            key.clone(),
            AnnotationEntry { points, boxes, class },
        );
    }
    Ok(entries)
}

/// Load every sample listed in the split file, reading images from
/// `images_dir`.
///
/// Boxes beyond [`MAX_EXEMPLARS`] are truncated to the first three;
/// coordinates are clamped to image bounds. A missing image file or missing
/// annotation entry produces a per-sample error record instead of aborting.
pub fn load_annotations(ann_path: &Path, images_dir: &Path, splits: &SplitFile) -> Result<LoadOutcome> {
    let entries = parse_annotation_doc(ann_path)?;
    let mut outcome = LoadOutcome::default();
    for split in Split::ALL {
        for file in splits.files(split) {
            match load_one(&entries, images_dir, file, split) {
                Ok(sample) => outcome.samples.push(sample),
                Err(e) => outcome.errors.push(SampleError {
                    id: file.clone(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(outcome)
}

fn load_one(
    entries: &BTreeMap<String, AnnotationEntry>,
    images_dir: &Path,
    file: &str,
    split: Split,
) -> Result<ImageSample> {
    let entry = entries.get(file).ok_or_else(|| Error::Annotation {
        key: file.to_owned(),
        msg: "no annotation entry for listed file".into(),
    })?;
    let path: PathBuf = images_dir.join(file);
    let image = ImageBuf::load(&path)?;
    let (h, w) = (image.height(), image.width());
    let dots = entry
        .points
        .iter()
        .map(|d| DotAnnotation {
            x: d.x.clamp(0.0, w as f64 - 1e-6),
            y: d.y.clamp(0.0, h as f64 - 1e-6),
        })
        .collect();
    let exemplars = entry
        .boxes
        .iter()
        .take(MAX_EXEMPLARS)
        .filter_map(|b| b.clamped(h, w))
        .collect();
    let sample = ImageSample {
        id: file.to_owned(),
        image,
        dots,
        exemplars,
        class_label: entry.class.clone(),
        split,
    };
    sample.validate()?;
    Ok(sample)
}
