//! The fine-tuning objective: per-pixel squared error against the ground
//! truth density, with a seeded Bernoulli drop of non-object pixels. The
//! denominator stays H·W whatever the drop does, so the scale of the loss is
//! stable across seeds.

use crate::error::{Error, Result};
use crate::rng;
use crate::training::TrainConfig;
use candle_core::Tensor;
use rand::Rng;

/// Scaled masked squared error. `pred` and `gt` are (B, H, W) on the same
/// device; `gt` is detached ground truth. Pixels with gt == 0 are zeroed in
/// the numerator with probability `cfg.nonobject_drop`, resampled per call
/// from `seed`; the sum is divided by the fixed H·W, averaged over the
/// batch, and multiplied by `cfg.loss_scale`.
pub fn counting_loss(pred: &Tensor, gt: &Tensor, cfg: &TrainConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    let (b, h, w) = pred.dims3()?;
    let diff = (pred - gt)?;
    let sq = (&diff * &diff)?;
    let masked = if cfg.nonobject_drop > 0.0 {
        let gt_vals: Vec<f64> = gt.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
        let mut r = rng::substream(seed, "drop");
        let mask_vals: Vec<f64> = gt_vals
            .iter()
            .map(|&g| {
                if g == 0.0 && r.gen::<f64>() < cfg.nonobject_drop {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let mask = Tensor::from_vec(mask_vals, (b, h, w), pred.device())?.to_dtype(pred.dtype())?;
        (&sq * &mask)?
    } else {
        sq
    };
    let per_image = (masked.sum_all()? / (h as f64 * w as f64))?;
    let mean = (per_image / b as f64)?;
    Ok((mean * cfg.loss_scale)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cfg(drop: f64, scale: f64) -> TrainConfig {
        TrainConfig {
            nonobject_drop: drop,
            loss_scale: scale,
            ..Default::default()
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identical_maps_give_zero() {
        let p = Tensor::randn(0f32, 1f32, (2, 8, 8), &Device::Cpu).unwrap();
        let l = counting_loss(&p, &p, &cfg(0.2, 60.0), 7).unwrap();
        assert_eq!(scalar(&l), 0.0);
    }

    #[test]
    fn unit_offset_on_zero_gt_hits_the_scale() {
        let gt = Tensor::zeros((1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let pred = Tensor::ones((1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let l = counting_loss(&pred, &gt, &cfg(0.0, 60.0), 0).unwrap();
        assert!((scalar(&l) - 60.0).abs() < 1e-5, "{}", scalar(&l));
    }

    #[test]
    fn full_drop_on_zero_gt_erases_the_loss() {
        let gt = Tensor::zeros((1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let pred = Tensor::randn(0f32, 1f32, (1, 8, 8), &Device::Cpu).unwrap();
        let l = counting_loss(&pred, &gt, &cfg(0.999_999_999, 1.0), 3).unwrap();
        assert_eq!(scalar(&l), 0.0);
    }

    #[test]
    fn drop_seed_is_irrelevant_when_gt_has_no_zeros() {
        let gt = Tensor::full(0.5f32, (1, 8, 8), &Device::Cpu).unwrap();
        let pred = Tensor::randn(0f32, 1f32, (1, 8, 8), &Device::Cpu).unwrap();
        let a = scalar(&counting_loss(&pred, &gt, &cfg(0.7, 60.0), 1).unwrap());
        let b = scalar(&counting_loss(&pred, &gt, &cfg(0.7, 60.0), 999).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn denominator_is_fixed_under_dropping() {
        // gt zero on half the pixels; error only on NON-zero pixels, so the
        // drop mask cannot touch the numerator and every seed must agree
        let mut gt_v = vec![0f32; 16];
        let mut pred_v = vec![0f32; 16];
        for i in 8..16 {
            gt_v[i] = 1.0;
            pred_v[i] = 2.0;
        }
        let gt = Tensor::from_vec(gt_v, (1, 4, 4), &Device::Cpu).unwrap();
        let pred = Tensor::from_vec(pred_v, (1, 4, 4), &Device::Cpu).unwrap();
        for seed in 0..5 {
            let l = scalar(&counting_loss(&pred, &gt, &cfg(0.9, 60.0), seed).unwrap());
            // 8 pixels with squared error 1, over 16 pixels, times 60
            assert!((l - 30.0).abs() < 1e-5, "{l}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros((1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(counting_loss(&a, &b, &cfg(0.0, 60.0), 0).is_err());
    }
}
