//! Vision-transformer image encoder: non-overlapping patch projection with a
//! fixed 2D sinusoidal position table (no class token), followed by pre-norm
//! transformer blocks and a final layer norm. The masked-pretraining path
//! reuses the same weights but drops tokens after position addition.

use crate::error::{Error, Result};
use crate::model::layers::{layer_norm, linear, sincos_2d, EncoderBlock, Norm};
use crate::model::store::ParamStore;
use candle_core::Tensor;
use candle_nn::{Linear, Module};

pub struct VitEncoder {
    patch: usize,
    grid: usize,
    dim: usize,
    embed: Linear,
    pos: Tensor, // (1, M, dim), constant
    blocks: Vec<EncoderBlock>,
    norm: Norm,
}

/// Rearrange (B, 3, H, W) pixels into (B, M, 3·p²) flattened patches in
/// row-major patch order, channel-major within a patch.
pub fn patchify_pixels(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            format!("spatial dims divisible by {patch}"),
            format!("({h}, {w})"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let x = images
        .reshape((b, c, gh, patch, gw, patch))?
        .permute([0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?;
    Ok(x)
}

impl VitEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        image_size: usize,
        patch: usize,
        depth: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let grid = image_size / patch;
        let embed = linear(store, &format!("{prefix}.embed"), 3 * patch * patch, dim, true)?;
        let pos = sincos_2d(grid, dim, store.dtype(), &store.device().clone())?;
        let blocks = (0..depth)
            .map(|i| EncoderBlock::new(store, &format!("{prefix}.block{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = layer_norm(store, &format!("{prefix}.norm"), dim)?;
        Ok(Self { patch, grid, dim, embed, pos, blocks, norm })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Patch projection plus position table, before any transformer block.
    pub fn embed_with_pos(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.embed.forward(&patchify_pixels(images, self.patch)?)?;
        Ok(tokens.broadcast_add(&self.pos)?)
    }

    /// Full encoding: (B, 3, H, W) → (B, M, dim).
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.embed_with_pos(images)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        Ok(self.norm.forward(&x)?)
    }

    /// Encode only the tokens listed in `keep` (indices into the M patch
    /// positions): the masked-pretraining visible path.
    pub fn forward_visible(&self, images: &Tensor, keep: &[usize]) -> Result<Tensor> {
        if keep.is_empty() {
            return Err(Error::Invalid("visible token set is empty".into()));
        }
        let m = self.num_tokens();
        if let Some(bad) = keep.iter().find(|&&i| i >= m) {
            return Err(Error::Invalid(format!("visible index {bad} out of {m} tokens")));
        }
        let idx = Tensor::from_vec(
            keep.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            keep.len(),
            self.pos.device(),
        )?;
        let mut x = self.embed_with_pos(images)?.index_select(&idx, 1)?.contiguous()?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        Ok(self.norm.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn enc(dim: usize) -> (ParamStore, VitEncoder) {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        let e = VitEncoder::new(&mut s, "encoder", 64, 16, 2, dim, 4).unwrap();
        (s, e)
    }

    #[test]
    fn patchify_shape_and_locality() {
        let a = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let pa = patchify_pixels(&a, 16).unwrap();
        assert_eq!(pa.dims(), &[1, 16, 768]);

        // two images differing in exactly one patch differ at one token row
        let mut v = vec![0f32; 3 * 64 * 64];
        // patch (row 1, col 2) spans rows 16..32, cols 32..48 in each channel
        for r in 16..32 {
            for c in 32..48 {
                v[64 * 64 + r * 64 + c] = 0.7; // channel 1
            }
        }
        let b = Tensor::from_vec(v, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let pb = patchify_pixels(&b, 16).unwrap();
        let da = pa.to_vec3::<f32>().unwrap();
        let db = pb.to_vec3::<f32>().unwrap();
        let mut differing = vec![];
        for t in 0..16 {
            if da[0][t] != db[0][t] {
                differing.push(t);
            }
        }
        assert_eq!(differing, vec![1 * 4 + 2]);
    }

    #[test]
    fn zero_image_tokens_follow_position_table() {
        let (_, e) = enc(32);
        let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let toks = e.embed_with_pos(&img).unwrap();
        // all-zero patches → every token is bias + its positional row, so
        // subtracting the position table leaves identical rows
        let depos = toks.broadcast_sub(&e.pos).unwrap().to_vec3::<f32>().unwrap();
        for t in 1..16 {
            assert_eq!(depos[0][0], depos[0][t]);
        }
    }

    #[test]
    fn encode_shape_toy() {
        let (_, e) = enc(32);
        let img = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let out = e.forward(&img).unwrap();
        assert_eq!(out.dims(), &[1, 16, 32]);
    }

    #[test]
    fn identical_batch_rows_encode_identically() {
        let (_, e) = enc(32);
        let one = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let two = Tensor::cat(&[&one, &one], 0).unwrap();
        let out = e.forward(&two).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn visible_path_matches_full_encoding_only_in_shape() {
        let (_, e) = enc(32);
        let img = Tensor::randn(0f32, 1f32, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let vis = e.forward_visible(&img, &[0, 3, 7, 9, 12, 15, 2, 5]).unwrap();
        assert_eq!(vis.dims(), &[2, 8, 32]);
        assert!(e.forward_visible(&img, &[]).is_err());
        assert!(e.forward_visible(&img, &[16]).is_err());
    }
}
