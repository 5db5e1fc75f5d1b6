//! Masked-autoencoder pre-training model. The encoder sees only the visible
//! tokens; the decoder's query stream is a learnable mask token plus the
//! position table at every patch position, cross-attending to the embedded
//! visible tokens. Reconstruction is scored in raw pixel space on the masked
//! patches only.

use crate::error::{Error, Result};
use crate::model::layers::{layer_norm, linear, sincos_2d, CrossBlock, Norm};
use crate::model::store::{self, Init, ParamStore};
use crate::model::vit::{patchify_pixels, VitEncoder};
use crate::model::ModelConfig;
use crate::training::PretrainConfig;
use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module};
use std::path::Path;

pub struct MaeModel {
    pub cfg: ModelConfig,
    pub pretrain: PretrainConfig,
    pub encoder: VitEncoder,
    embed: Linear,
    mask_token: Tensor, // (1, 1, dec_dim)
    dec_pos: Tensor,    // (1, M, dec_dim), constant
    blocks: Vec<CrossBlock>,
    norm: Norm,
    pred: Linear,
    pub store: ParamStore,
}

impl MaeModel {
    pub fn new(cfg: &ModelConfig, pretrain: &PretrainConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        pretrain.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let encoder = VitEncoder::new(
            &mut store,
            "encoder",
            cfg.image_size,
            cfg.patch_size,
            cfg.encoder_depth,
            cfg.encoder_dim,
            cfg.encoder_heads,
        )?;
        let dec_dim = pretrain.mae_decoder_dim;
        let embed = linear(&mut store, "mae.embed", cfg.encoder_dim, dec_dim, true)?;
        let mask_token = store.param("mae.mask_token", &[1, 1, dec_dim], Init::TruncNormal(0.02))?;
        let dec_pos = sincos_2d(cfg.grid(), dec_dim, dtype, &device)?;
        let blocks = (0..pretrain.mae_decoder_depth)
            .map(|i| CrossBlock::new(&mut store, &format!("mae.block{i}"), dec_dim, pretrain.mae_decoder_heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = layer_norm(&mut store, "mae.norm", dec_dim)?;
        let patch_pixels = 3 * cfg.patch_size * cfg.patch_size;
        let pred = linear(&mut store, "mae.pred", dec_dim, patch_pixels, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            pretrain: pretrain.clone(),
            encoder,
            embed,
            mask_token,
            dec_pos,
            blocks,
            norm,
            pred,
            store,
        })
    }

    /// Reconstruct all patch positions from the visible subset:
    /// (B, 3, H, W) → (B, M, 3·p²).
    pub fn reconstruct(&self, images: &Tensor, keep: &[usize]) -> Result<Tensor> {
        let (b, _, _, _) = images.dims4()?;
        let visible = self.encoder.forward_visible(images, keep)?;
        let kv = self.embed.forward(&visible)?;
        let m = self.encoder.num_tokens();
        let queries = self
            .mask_token
            .broadcast_as((b, m, self.pretrain.mae_decoder_dim))?
            .broadcast_add(&self.dec_pos)?
            .contiguous()?;
        let mut x = queries;
        for blk in &self.blocks {
            x = blk.forward(&x, &kv, &kv)?;
        }
        Ok(self.pred.forward(&self.norm.forward(&x)?)?)
    }

    /// Mean squared error over the masked patch rows only.
    pub fn reconstruction_loss(&self, pred: &Tensor, target: &Tensor, masked: &[usize]) -> Result<Tensor> {
        if masked.is_empty() {
            return Err(Error::Invalid("masked index set is empty".into()));
        }
        if pred.dims() != target.dims() {
            return Err(Error::shape(format!("{:?}", pred.dims()), format!("{:?}", target.dims())));
        }
        let idx = Tensor::from_vec(
            masked.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            masked.len(),
            pred.device(),
        )?;
        let p = pred.index_select(&idx, 1)?;
        let t = target.index_select(&idx, 1)?;
        let diff = (p - t)?;
        Ok((&diff * &diff)?.mean_all()?)
    }

    /// Full step value: reconstruct from the visible subset of the
    /// (normalized) encoder input, score against raw-RGB pixels on the mask.
    pub fn forward_loss(&self, input: &Tensor, raw: &Tensor, keep: &[usize], masked: &[usize]) -> Result<Tensor> {
        let pred = self.reconstruct(input, keep)?;
        let target = patchify_pixels(raw, self.cfg.patch_size)?;
        self.reconstruction_loss(&pred, &target, masked)
    }

    pub fn config_json(&self) -> Result<String> {
        serde_json::to_string(&self.cfg).map_err(|e| Error::Invalid(format!("config serialization: {e}")))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        store::save_checkpoint(path, self.store.named_vars(), "mae", &self.config_json()?)
    }

    /// Restore weights from a checkpoint produced by [`MaeModel::save`];
    /// the stored config must equal `cfg`.
    pub fn load<P: AsRef<Path>>(
        path: P,
        cfg: &ModelConfig,
        pretrain: &PretrainConfig,
        dtype: DType,
        device: Device,
    ) -> Result<Self> {
        let ck = store::load_checkpoint(&path, &device)?;
        if ck.kind != "mae" {
            return Err(Error::Checkpoint {
                path: path.as_ref().to_path_buf(),
                msg: format!("kind \"{}\" is not a pre-training checkpoint", ck.kind),
            });
        }
        let stored: ModelConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Invalid(format!("stored config: {e}")))?;
        if &stored != cfg {
            return Err(Error::Checkpoint {
                path: path.as_ref().to_path_buf(),
                msg: "stored model config differs from the requested one".into(),
            });
        }
        let mut model = Self::new(cfg, pretrain, 0, dtype, device)?;
        model.store.load_tensors(&ck.tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::random_mask;

    fn toy_mae() -> MaeModel {
        let cfg = ModelConfig::toy();
        let pcfg = PretrainConfig {
            mae_decoder_depth: 2,
            mae_decoder_dim: 32,
            mae_decoder_heads: 4,
            ..Default::default()
        };
        MaeModel::new(&cfg, &pcfg, 7, DType::F32, Device::Cpu).unwrap()
    }

    #[test]
    fn reconstruction_covers_all_patch_positions() {
        let m = toy_mae();
        let img = Tensor::randn(0f32, 1f32, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let (keep, masked) = random_mask(16, 0.5, 11).unwrap();
        let out = m.reconstruct(&img, &keep).unwrap();
        assert_eq!(out.dims(), &[2, 16, 768]);
        assert_eq!(keep.len() + masked.len(), 16);
    }

    #[test]
    fn loss_ignores_visible_positions() {
        let m = toy_mae();
        let img = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let (keep, masked) = random_mask(16, 0.5, 5).unwrap();
        let pred = m.reconstruct(&img, &keep).unwrap();
        let target = patchify_pixels(&img, 16).unwrap();
        let base = m
            .reconstruction_loss(&pred, &target, &masked)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        // corrupt the target at every VISIBLE position; loss must not move
        let mut corruption = vec![0f32; 16 * 768];
        for &i in &keep {
            for j in 0..768 {
                corruption[i * 768 + j] = 123.0;
            }
        }
        let corrupted = target
            .broadcast_add(&Tensor::from_vec(corruption, (1, 16, 768), &Device::Cpu).unwrap())
            .unwrap();
        let after = m
            .reconstruction_loss(&pred, &corrupted, &masked)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(base, after);
        assert!(base >= 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_restores_reconstruction() {
        let m = toy_mae();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mae.safetensors");
        m.save(&path).unwrap();
        let loaded = MaeModel::load(&path, &m.cfg, &m.pretrain, DType::F32, Device::Cpu).unwrap();
        let img = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let keep = vec![0, 2, 4, 6, 8, 10, 12, 14];
        let a: Vec<f32> = m.reconstruct(&img, &keep).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = loaded.reconstruct(&img, &keep).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
