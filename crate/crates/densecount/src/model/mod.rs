//! The counting network: a transformer image encoder, a convolutional
//! exemplar encoder, a cross-attention interaction stack and a progressive
//! density decoder, assembled behind one flat parameter namespace.

pub mod decoder;
pub mod exemplar;
pub mod fim;
pub mod layers;
pub mod mae;
pub mod store;
pub mod vit;

pub use mae::MaeModel;

use crate::data::{DensityMap, ExemplarBox, Provenance};
use crate::error::{Error, Result};
use crate::imgbuf::{ChannelNorm, ImageBuf};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub fim_depth: usize,
    pub fim_dim: usize,
    pub fim_heads: usize,
    pub exemplar_dim: usize,
    pub exemplar_resolution: usize,
    pub decoder_blocks: usize,
    pub decoder_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 384,
            patch_size: 16,
            encoder_depth: 12,
            encoder_dim: 768,
            encoder_heads: 12,
            fim_depth: 2,
            fim_dim: 512,
            fim_heads: 8,
            exemplar_dim: 512,
            exemplar_resolution: 64,
            decoder_blocks: 4,
            decoder_dim: 256,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for fast experiments: 64-px images on a 4×4
    /// token grid with 32-wide features.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 16,
            encoder_depth: 2,
            encoder_dim: 32,
            encoder_heads: 4,
            fim_depth: 2,
            fim_dim: 32,
            fim_heads: 4,
            exemplar_dim: 32,
            exemplar_resolution: 16,
            decoder_blocks: 4,
            decoder_dim: 16,
        }
    }

    /// Smallest self-consistent configuration, for finite-difference
    /// gradient checks in double precision.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            encoder_depth: 1,
            encoder_dim: 8,
            encoder_heads: 2,
            fim_depth: 1,
            fim_dim: 8,
            fim_heads: 2,
            exemplar_dim: 8,
            exemplar_resolution: 8,
            decoder_blocks: 2,
            decoder_dim: 4,
        }
    }

    /// Tokens per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Total token count M.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let restored = (1usize << self.decoder_blocks) * self.grid();
        if restored != self.image_size {
            return Err(Error::Config(format!(
                "decoder_blocks {}: 2^blocks x {} token grid restores {restored}px, need {}",
                self.decoder_blocks,
                self.grid(),
                self.image_size
            )));
        }
        if self.encoder_dim % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "encoder_dim {} not divisible by {} heads",
                self.encoder_dim, self.encoder_heads
            )));
        }
        if self.fim_dim % self.fim_heads != 0 {
            return Err(Error::Config(format!(
                "fim_dim {} not divisible by {} heads",
                self.fim_dim, self.fim_heads
            )));
        }
        if self.encoder_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "encoder_dim {} must be divisible by 4 for the position table",
                self.encoder_dim
            )));
        }
        if self.exemplar_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "exemplar_dim {} must be divisible by 8 (channel ladder)",
                self.exemplar_dim
            )));
        }
        if self.exemplar_resolution < 8 {
            return Err(Error::Config(format!(
                "exemplar_resolution {} too small",
                self.exemplar_resolution
            )));
        }
        Ok(())
    }
}

/// Where a token grid came from, fixing its expected width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Vit,
    Exemplar,
    Fim,
}

/// A 2-D stack of feature vectors: (rows, width) where rows is the token
/// count M for image-derived grids or K for exemplar features.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub origin: TokenOrigin,
}

impl TokenGrid {
    fn new(tokens: Tensor, origin: TokenOrigin) -> Result<Self> {
        if tokens.dims().len() != 2 {
            return Err(Error::shape("rank-2 token grid", format!("{:?}", tokens.dims())));
        }
        Ok(Self { tokens, origin })
    }

    pub fn rows(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[1]
    }
}

pub struct CountingModel {
    pub cfg: ModelConfig,
    vit: vit::VitEncoder,
    exemplar: exemplar::ExemplarEncoder,
    fim: fim::Fim,
    decoder: decoder::DensityDecoder,
    pub store: store::ParamStore,
    norm: ChannelNorm,
}

impl CountingModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = store::ParamStore::new(seed, dtype, device);
        let vit = vit::VitEncoder::new(
            &mut store,
            "encoder",
            cfg.image_size,
            cfg.patch_size,
            cfg.encoder_depth,
            cfg.encoder_dim,
            cfg.encoder_heads,
        )?;
        let exemplar = exemplar::ExemplarEncoder::new(&mut store, "exemplar", cfg.exemplar_dim)?;
        let fim = fim::Fim::new(
            &mut store,
            "fim",
            cfg.encoder_dim,
            cfg.exemplar_dim,
            cfg.fim_dim,
            cfg.fim_depth,
            cfg.fim_heads,
        )?;
        let decoder = decoder::DensityDecoder::new(
            &mut store,
            "decoder",
            cfg.grid(),
            cfg.fim_dim,
            cfg.decoder_dim,
            cfg.decoder_blocks,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            vit,
            exemplar,
            fim,
            decoder,
            store,
            norm: ChannelNorm::default(),
        })
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Normalize an image into the model's (1, 3, H, W) input tensor.
    pub fn image_tensor(&self, image: &ImageBuf) -> Result<Tensor> {
        if image.height() != self.cfg.image_size || image.width() != self.cfg.image_size {
            return Err(Error::shape(
                format!("{0}x{0} image", self.cfg.image_size),
                format!("{}x{}", image.height(), image.width()),
            ));
        }
        image.to_tensor(Some(&self.norm), self.dtype(), &self.device())
    }

    /// Cut the exemplar boxes out of `image` and stack them as a
    /// (K, 3, R, R) normalized crop batch.
    pub fn exemplar_crops(&self, image: &ImageBuf, boxes: &[ExemplarBox]) -> Result<Tensor> {
        if boxes.is_empty() {
            return Err(Error::Invalid("no exemplar boxes; use the zero-shot path".into()));
        }
        let r = self.cfg.exemplar_resolution;
        let mut crops = Vec::with_capacity(boxes.len());
        for b in boxes {
            let patch = image.crop_resize(b.y1, b.x1, b.height().max(1.0), b.width().max(1.0), r, r);
            crops.push(patch.to_tensor(Some(&self.norm), self.dtype(), &self.device())?);
        }
        Ok(Tensor::cat(&crops, 0)?)
    }

    /// Patch projection plus position table, before any transformer block.
    pub fn patchify(&self, image: &ImageBuf) -> Result<TokenGrid> {
        let x = self.vit.embed_with_pos(&self.image_tensor(image)?)?;
        TokenGrid::new(x.squeeze(0)?, TokenOrigin::Vit)
    }

    /// Full encoder: image → (M, encoder_dim) tokens.
    pub fn vit_encode(&self, image: &ImageBuf) -> Result<TokenGrid> {
        let x = self.vit.forward(&self.image_tensor(image)?)?;
        TokenGrid::new(x.squeeze(0)?, TokenOrigin::Vit)
    }

    /// Exemplar boxes → (K, exemplar_dim) pooled features.
    pub fn exemplar_encode(&self, image: &ImageBuf, boxes: &[ExemplarBox]) -> Result<TokenGrid> {
        let feats = self.exemplar.forward(&self.exemplar_crops(image, boxes)?)?;
        TokenGrid::new(feats, TokenOrigin::Exemplar)
    }

    /// Interaction: image tokens cross-attend to exemplar features (or the
    /// stand-in token when `side` is `None`).
    pub fn fim_forward(&self, image_tokens: &TokenGrid, side: Option<&TokenGrid>) -> Result<TokenGrid> {
        if image_tokens.origin != TokenOrigin::Vit {
            return Err(Error::Invalid("interaction expects encoder tokens".into()));
        }
        if image_tokens.width() != self.cfg.encoder_dim {
            return Err(Error::shape(
                format!("width {}", self.cfg.encoder_dim),
                format!("{}", image_tokens.width()),
            ));
        }
        let img = image_tokens.tokens.unsqueeze(0)?;
        let side_t = match side {
            Some(s) => {
                if s.origin != TokenOrigin::Exemplar {
                    return Err(Error::Invalid("side tokens must be exemplar features".into()));
                }
                Some(s.tokens.unsqueeze(0)?)
            }
            None => None,
        };
        let out = self.fim.forward(&img, side_t.as_ref())?;
        TokenGrid::new(out.squeeze(0)?, TokenOrigin::Fim)
    }

    /// Interaction tokens → full-resolution density grid.
    pub fn decode_density(&self, fim_tokens: &TokenGrid) -> Result<DensityMap> {
        if fim_tokens.origin != TokenOrigin::Fim {
            return Err(Error::Invalid("density decoding expects interaction tokens".into()));
        }
        let out = self.decoder.forward(&fim_tokens.tokens.unsqueeze(0)?)?;
        let (h, w) = (out.dim(1)?, out.dim(2)?);
        let values: Vec<f64> = out
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        DensityMap::from_grid(h, w, values, Provenance::Prediction)
    }

    /// Whole pipeline for one image: encode, interact, decode.
    pub fn forward(&self, image: &ImageBuf, boxes: &[ExemplarBox]) -> Result<DensityMap> {
        let img_tokens = self.vit_encode(image)?;
        let side = if boxes.is_empty() {
            None
        } else {
            Some(self.exemplar_encode(image, boxes)?)
        };
        let fim_tokens = self.fim_forward(&img_tokens, side.as_ref())?;
        self.decode_density(&fim_tokens)
    }

    /// Batched training path on pre-normalized tensors: (B, 3, H, W) images
    /// and optional (B, K, exemplar_dim) features → (B, H, W) densities,
    /// keeping the whole computation on the autograd graph.
    pub fn forward_batch(&self, images: &Tensor, side: Option<&Tensor>) -> Result<Tensor> {
        let tokens = self.vit.forward(images)?;
        let fim_out = self.fim.forward(&tokens, side)?;
        self.decoder.forward(&fim_out)
    }

    /// Encode exemplar features for a batch: one (K, 3, R, R) crop stack per
    /// sample → (B, K, exemplar_dim).
    pub fn encode_exemplar_batch(&self, crop_stacks: &[Tensor]) -> Result<Tensor> {
        let feats = crop_stacks
            .iter()
            .map(|crops| Ok(self.exemplar.forward(crops)?.unsqueeze(0)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&feats, 0)?)
    }

    pub fn config_json(&self) -> Result<String> {
        serde_json::to_string(&self.cfg).map_err(|e| Error::Invalid(format!("config serialization: {e}")))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        store::save_checkpoint(path, self.store.named_vars(), "counting", &self.config_json()?)
    }

    /// Rebuild a model from a counting checkpoint, taking the architecture
    /// from the stored config echo.
    pub fn load<P: AsRef<Path>>(path: P, dtype: DType, device: Device) -> Result<Self> {
        let ck = store::load_checkpoint(&path, &device)?;
        if ck.kind != "counting" {
            return Err(Error::Checkpoint {
                path: path.as_ref().to_path_buf(),
                msg: format!("kind \"{}\" is not a counting checkpoint", ck.kind),
            });
        }
        let cfg: ModelConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Invalid(format!("stored config: {e}")))?;
        let mut model = Self::new(&cfg, 0, dtype, device)?;
        model.store.load_tensors(&ck.tensors)?;
        Ok(model)
    }

    /// Initialize the image encoder from a pre-training checkpoint; all
    /// other parameters keep their fresh initialization. Returns the number
    /// of copied tensors.
    pub fn init_encoder_from<P: AsRef<Path>>(&mut self, path: P) -> Result<usize> {
        let ck = store::load_checkpoint(&path, &self.device())?;
        if ck.kind != "mae" {
            return Err(Error::Checkpoint {
                path: path.as_ref().to_path_buf(),
                msg: format!("kind \"{}\" is not a pre-training checkpoint", ck.kind),
            });
        }
        let stored: ModelConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Invalid(format!("stored config: {e}")))?;
        if stored != self.cfg {
            return Err(Error::Checkpoint {
                path: path.as_ref().to_path_buf(),
                msg: "pre-training config differs from the counting model's".into(),
            });
        }
        let n = self.store.load_prefixed(&ck.tensors, "encoder.")?;
        if n == 0 {
            return Err(Error::Checkpoint {
                path: path.as_ref().to_path_buf(),
                msg: "no encoder parameters found".into(),
            });
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> CountingModel {
        CountingModel::new(&ModelConfig::toy(), 5, DType::F32, Device::Cpu).unwrap()
    }

    fn toy_image() -> ImageBuf {
        ImageBuf::from_fn(64, 64, |r, c| {
            [
                (r as f32 / 64.0).fract(),
                (c as f32 / 64.0).fract(),
                ((r + c) as f32 / 128.0).fract(),
            ]
        })
    }

    fn toy_boxes() -> Vec<ExemplarBox> {
        vec![
            ExemplarBox::new(4.0, 4.0, 14.0, 14.0).unwrap(),
            ExemplarBox::new(20.0, 8.0, 30.0, 18.0).unwrap(),
            ExemplarBox::new(40.0, 40.0, 52.0, 52.0).unwrap(),
        ]
    }

    #[test]
    fn default_config_is_valid_and_restores_resolution() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_tokens(), 576);
        assert_eq!((1 << cfg.decoder_blocks) * cfg.grid(), 384);
        ModelConfig::toy().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.patch_size = 24; // 64 % 24 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.decoder_blocks = 3; // 2³·4 = 32 ≠ 64
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_shape_contract() {
        let m = toy_model();
        let img = toy_image();
        let pre = m.patchify(&img).unwrap();
        assert_eq!((pre.rows(), pre.width()), (16, 32));
        let enc = m.vit_encode(&img).unwrap();
        assert_eq!((enc.rows(), enc.width()), (16, 32));
        let side = m.exemplar_encode(&img, &toy_boxes()).unwrap();
        assert_eq!((side.rows(), side.width()), (3, 32));
        let fim = m.fim_forward(&enc, Some(&side)).unwrap();
        assert_eq!((fim.rows(), fim.width()), (16, 32));
        let density = m.decode_density(&fim).unwrap();
        assert_eq!((density.height(), density.width()), (64, 64));
    }

    #[test]
    fn zero_shot_path_produces_full_map() {
        let m = toy_model();
        let d = m.forward(&toy_image(), &[]).unwrap();
        assert_eq!((d.height(), d.width()), (64, 64));
        assert!(d.sum().is_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = toy_model();
        let a = m.forward(&toy_image(), &toy_boxes()).unwrap();
        let b = m.forward(&toy_image(), &toy_boxes()).unwrap();
        assert_eq!(a.grid(), b.grid());
    }

    #[test]
    fn wrong_image_size_rejected() {
        let m = toy_model();
        let img = ImageBuf::constant(32, 64, [0.5; 3]);
        assert!(m.forward(&img, &[]).is_err());
        assert!(m.exemplar_encode(&toy_image(), &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let m = toy_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counting.safetensors");
        m.save(&path).unwrap();
        let loaded = CountingModel::load(&path, DType::F32, Device::Cpu).unwrap();
        let a = m.forward(&toy_image(), &toy_boxes()).unwrap();
        let b = loaded.forward(&toy_image(), &toy_boxes()).unwrap();
        assert_eq!(a.grid(), b.grid());
    }

    #[test]
    fn encoder_init_copies_only_encoder_weights() {
        use crate::training::PretrainConfig;
        let pcfg = PretrainConfig {
            mae_decoder_depth: 1,
            mae_decoder_dim: 32,
            mae_decoder_heads: 4,
            ..Default::default()
        };
        let mae = mae::MaeModel::new(&ModelConfig::toy(), &pcfg, 11, DType::F32, Device::Cpu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mae.safetensors");
        mae.save(&path).unwrap();

        let mut m = toy_model();
        let before = m.forward(&toy_image(), &toy_boxes()).unwrap();
        let n = m.init_encoder_from(&path).unwrap();
        assert!(n > 0);
        let after = m.forward(&toy_image(), &toy_boxes()).unwrap();
        // encoder weights changed, so the prediction changes
        assert_ne!(before.grid(), after.grid());
        // loading a counting checkpoint as an encoder source must fail
        let cpath = dir.path().join("counting.safetensors");
        m.save(&cpath).unwrap();
        assert!(m.init_encoder_from(&cpath).is_err());
    }
}
