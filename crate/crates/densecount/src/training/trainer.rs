//! The two optimization loops. Both cycle their sample list in shuffled
//! epochs, log one JSON line per step and are deterministic under the run
//! seed: data order, masking, pixel dropping and augmentation each draw
//! from an independently labeled substream.

use crate::data::generate_density_map;
use crate::data::{rescale_sample, ImageSample};
use crate::error::{Error, Result};
use crate::imgbuf::{ChannelNorm, ImageBuf};
use crate::model::mae::MaeModel;
use crate::model::CountingModel;
use crate::rng;
use crate::training::{augment_sample, counting_loss, random_mask, TrainConfig, TrainExample};
use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn write_log(path: &Option<PathBuf>, records: &[StepRecord]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(format!("log record: {e}")))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Endlessly cycle 0..n in reshuffled epochs.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha12Rng,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng: rng::substream(seed, "data"),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
}

/// Masked-reconstruction pre-training over `images` (all at the model's
/// input size). Returns the per-step loss trace.
pub fn pretrain(model: &MaeModel, images: &[ImageBuf], opts: &PretrainOptions) -> Result<Vec<StepRecord>> {
    if images.is_empty() {
        return Err(Error::Invalid("pre-training image list is empty".into()));
    }
    let cfg = &model.pretrain;
    cfg.validate()?;
    let size = model.cfg.image_size;
    let device = model.store.device().clone();
    let dtype = model.store.dtype();
    let norm = ChannelNorm::default();
    let mut normalized = Vec::with_capacity(images.len());
    let mut raw = Vec::with_capacity(images.len());
    for img in images {
        if img.height() != size || img.width() != size {
            return Err(Error::shape(
                format!("{size}x{size} pre-training image"),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        normalized.push(img.to_tensor(Some(&norm), dtype, &device)?);
        raw.push(img.to_tensor(None, dtype, &device)?);
    }

    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            ..Default::default()
        },
    )?;
    let mut sampler = EpochSampler::new(images.len(), opts.seed);
    let mut mask_seeds = rng::substream(opts.seed, "mask-seq");
    let m = model.cfg.num_tokens();
    let mut records = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let idx = sampler.next_batch(cfg.batch_size.min(images.len()));
        let input = Tensor::cat(&idx.iter().map(|&i| normalized[i].clone()).collect::<Vec<_>>(), 0)?;
        let target = Tensor::cat(&idx.iter().map(|&i| raw[i].clone()).collect::<Vec<_>>(), 0)?;
        let (keep, masked) = random_mask(m, cfg.mask_ratio, mask_seeds.gen())?;
        let loss = model.forward_loss(&input, &target, &keep, &masked)?;
        opt.backward_step(&loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Invalid(format!("pre-training diverged at step {step}: loss {value}")));
        }
        records.push(StepRecord { step, loss: value, lr: cfg.learning_rate });
        log::debug!("pretrain step {step}: loss {value:.6}");
    }
    write_log(&opts.log_path, &records)?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub steps: usize,
    /// Exemplars fed per sample; 0 trains the stand-in-token path.
    pub shots: usize,
    /// Gaussian width for ground-truth density rendering.
    pub sigma: f64,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
}

/// Build the fixed per-sample training bases: resize to the model's input
/// size, render ground truth from the rescaled dots.
fn build_examples(samples: &[ImageSample], size: usize, shots: usize, sigma: f64) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if shots > 0 && s.shots() < shots {
            continue;
        }
        let scaled = if s.image.height() == size && s.image.width() == size {
            s.clone()
        } else {
            rescale_sample(s, size, size)?
        };
        let density = generate_density_map(&scaled.dots, size, size, sigma)?;
        out.push(TrainExample {
            image: scaled.image,
            density,
            dots: scaled.dots,
            boxes: scaled.exemplars,
        });
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!(
            "no usable training samples (need >= {shots} exemplar boxes each)"
        )));
    }
    Ok(out)
}

/// Supervised fine-tuning of the counting model. Returns the loss trace.
pub fn finetune(
    model: &CountingModel,
    samples: &[ImageSample],
    cfg: &TrainConfig,
    opts: &FinetuneOptions,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if opts.shots > crate::data::MAX_EXEMPLARS {
        return Err(Error::Invalid(format!(
            "shots {} exceeds the {}-exemplar budget",
            opts.shots,
            crate::data::MAX_EXEMPLARS
        )));
    }
    let size = model.cfg.image_size;
    let examples = build_examples(samples, size, opts.shots, opts.sigma)?;
    let device = model.device();
    let dtype = model.dtype();
    let norm = ChannelNorm::default();

    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            ..Default::default()
        },
    )?;
    let mut sampler = EpochSampler::new(examples.len(), opts.seed);
    let mut aug_rng = rng::substream(opts.seed, "augment");
    let mut drop_seeds = rng::substream(opts.seed, "drop-seq");
    let mut records = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let idx = sampler.next_batch(cfg.batch_size.min(examples.len()));
        let mut images = Vec::with_capacity(idx.len());
        let mut gts = Vec::with_capacity(idx.len());
        let mut crop_stacks = Vec::with_capacity(idx.len());
        for &i in &idx {
            let ex = augment_sample(&examples[i], &cfg.augment, &mut aug_rng)?;
            images.push(ex.image.to_tensor(Some(&norm), dtype, &device)?);
            let gt_vals: Vec<f64> = ex.density.grid().to_vec();
            gts.push(Tensor::from_vec(gt_vals, (1, size, size), &device)?.to_dtype(dtype)?);
            if opts.shots > 0 {
                crop_stacks.push(model.exemplar_crops(&ex.image, &ex.boxes[..opts.shots])?);
            }
        }
        let input = Tensor::cat(&images, 0)?;
        let gt = Tensor::cat(&gts, 0)?;
        let side = if opts.shots > 0 {
            Some(model.encode_exemplar_batch(&crop_stacks)?)
        } else {
            None
        };
        let pred = model.forward_batch(&input, side.as_ref())?;
        let loss = counting_loss(&pred, &gt, cfg, drop_seeds.gen())?;
        opt.backward_step(&loss)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Invalid(format!("fine-tuning diverged at step {step}: loss {value}")));
        }
        records.push(StepRecord { step, loss: value, lr: cfg.learning_rate });
        log::debug!("finetune step {step}: loss {value:.6}");
    }
    write_log(&opts.log_path, &records)?;
    Ok(records)
}
