//! Counting metrics (mean absolute error, root-mean-square error) and the
//! split-level benchmark harness, with an exclusion list for images whose
//! annotations are known to be wrong.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::inference::{predict_count, DensityModel, InferenceConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// Mean absolute error between predicted and ground-truth counts.
pub fn mae(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// Root-mean-square error between predicted and ground-truth counts.
pub fn rmse(preds: &[f64], gts: &[f64]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let total: f64 = preds.iter().zip(gts).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((total / preds.len() as f64).sqrt())
}

fn check_lengths(preds: &[f64], gts: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Invalid("metrics need at least one prediction".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// One evaluated image: predicted count, ground truth, and signed error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImage {
    pub id: String,
    pub pred: f64,
    pub gt: f64,
    pub error: f64,
}

/// A sample that was not evaluated, and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

/// Aggregate result for one split at one shot count. `n_images` counts only
/// evaluated images; exclusions and skips are recorded, not silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_images: usize,
    pub per_image: Vec<PerImage>,
    pub mae: f64,
    pub rmse: f64,
    pub shots: usize,
    pub excluded_ids: Vec<String>,
    pub skipped: Vec<Skipped>,
}

impl EvalResult {
    /// Per-image rows as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,pred,gt,error\n");
        for row in &self.per_image {
            let _ = writeln!(out, "{},{},{},{}", row.id, row.pred, row.gt, row.error);
        }
        out
    }
}

/// Evaluate every sample of a split: run the full prediction pipeline per
/// image and aggregate MAE/RMSE over the images actually evaluated. Samples
/// named in `exclude_ids` are recorded and skipped; samples without enough
/// exemplar boxes for the requested shot count are skipped with a warning
/// record.
pub fn evaluate_split<M: DensityModel>(
    model: &M,
    samples: &[ImageSample],
    shots: usize,
    cfg: &InferenceConfig,
    exclude_ids: &[String],
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one sample".into()));
    }
    let split = samples[0].split;
    if let Some(s) = samples.iter().find(|s| s.split != split) {
        return Err(Error::Invalid(format!(
            "sample \"{}\" belongs to {:?}, expected {split:?}",
            s.id, s.split
        )));
    }
    let exclude: BTreeSet<&str> = exclude_ids.iter().map(String::as_str).collect();
    let mut per_image = Vec::new();
    let mut excluded = Vec::new();
    let mut skipped = Vec::new();
    for sample in samples {
        if exclude.contains(sample.id.as_str()) {
            excluded.push(sample.id.clone());
            continue;
        }
        if sample.exemplars.len() < shots {
            log::warn!(
                "skipping \"{}\": {} exemplar boxes available, {shots} requested",
                sample.id,
                sample.exemplars.len()
            );
            skipped.push(Skipped {
                id: sample.id.clone(),
                reason: format!(
                    "{} exemplar boxes available, {shots} requested",
                    sample.exemplars.len()
                ),
            });
            continue;
        }
        let outcome = predict_count(model, sample, shots, cfg)?;
        let gt = sample.count() as f64;
        per_image.push(PerImage {
            id: sample.id.clone(),
            pred: outcome.count,
            gt,
            error: outcome.count - gt,
        });
    }
    per_image.sort_by(|a, b| a.id.cmp(&b.id));
    excluded.sort();
    skipped.sort_by(|a, b| a.id.cmp(&b.id));
    let preds: Vec<f64> = per_image.iter().map(|r| r.pred).collect();
    let gts: Vec<f64> = per_image.iter().map(|r| r.gt).collect();
    if preds.is_empty() {
        return Err(Error::Invalid(
            "every sample was excluded or skipped; nothing to evaluate".into(),
        ));
    }
    Ok(EvalResult {
        n_images: per_image.len(),
        mae: mae(&preds, &gts)?,
        rmse: rmse(&preds, &gts)?,
        per_image,
        shots,
        excluded_ids: excluded,
        skipped,
    })
}
