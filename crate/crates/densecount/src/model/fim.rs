//! Feature-interaction module: image tokens (projected to the interaction
//! width) query exemplar-derived keys and values through a stack of
//! transformer-decoder layers. One shared key projection and one shared
//! value projection serve every layer; exemplars get no positional encoding,
//! which makes the module exactly permutation-invariant in exemplar order.
//! With zero exemplars a single learnable token stands in for the features.

use crate::error::{Error, Result};
use crate::model::layers::{layer_norm, linear, CrossBlock, Norm};
use crate::model::store::{Init, ParamStore};
use candle_core::Tensor;
use candle_nn::{Linear, Module};

pub struct Fim {
    img_proj: Linear,
    key_proj: Linear,
    value_proj: Linear,
    spe: Tensor, // (1, 1, exemplar_dim) learnable stand-in token
    blocks: Vec<CrossBlock>,
    norm: Norm,
    dim: usize,
    exemplar_dim: usize,
}

impl Fim {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        encoder_dim: usize,
        exemplar_dim: usize,
        dim: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        let img_proj = linear(store, &format!("{prefix}.img_proj"), encoder_dim, dim, true)?;
        let key_proj = linear(store, &format!("{prefix}.key_proj"), exemplar_dim, dim, false)?;
        let value_proj = linear(store, &format!("{prefix}.value_proj"), exemplar_dim, dim, false)?;
        let spe = store.param(&format!("{prefix}.spe"), &[1, 1, exemplar_dim], Init::TruncNormal(0.02))?;
        let blocks = (0..depth)
            .map(|i| CrossBlock::new(store, &format!("{prefix}.block{i}"), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = layer_norm(store, &format!("{prefix}.norm"), dim)?;
        Ok(Self { img_proj, key_proj, value_proj, spe, blocks, norm, dim, exemplar_dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// (B, M, encoder_dim) image tokens and optional (B, K, exemplar_dim)
    /// exemplar features → (B, M, dim). `None` routes through the learnable
    /// stand-in token.
    pub fn forward(&self, image_tokens: &Tensor, side: Option<&Tensor>) -> Result<Tensor> {
        let (b, _, _) = image_tokens.dims3()?;
        let side = match side {
            Some(s) => {
                let (sb, _, se) = s.dims3()?;
                if sb != b || se != self.exemplar_dim {
                    return Err(Error::shape(
                        format!("({b}, K, {})", self.exemplar_dim),
                        format!("{:?}", s.dims()),
                    ));
                }
                s.clone()
            }
            None => self.spe.broadcast_as((b, 1, self.exemplar_dim))?.contiguous()?,
        };
        let k = self.key_proj.forward(&side)?;
        let v = self.value_proj.forward(&side)?;
        let mut x = self.img_proj.forward(image_tokens)?;
        for blk in &self.blocks {
            x = blk.forward(&x, &k, &v)?;
        }
        Ok(self.norm.forward(&x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn fim(dtype: DType) -> (ParamStore, Fim) {
        let mut s = ParamStore::new(0, dtype, Device::Cpu);
        let f = Fim::new(&mut s, "fim", 32, 16, 24, 2, 4).unwrap();
        (s, f)
    }

    #[test]
    fn few_shot_and_zero_shot_shapes() {
        let (_, f) = fim(DType::F32);
        let img = Tensor::randn(0f32, 1f32, (2, 9, 32), &Device::Cpu).unwrap();
        let side = Tensor::randn(0f32, 1f32, (2, 3, 16), &Device::Cpu).unwrap();
        assert_eq!(f.forward(&img, Some(&side)).unwrap().dims(), &[2, 9, 24]);
        assert_eq!(f.forward(&img, None).unwrap().dims(), &[2, 9, 24]);
    }

    #[test]
    fn exemplar_permutation_leaves_output_unchanged() {
        let (_, f) = fim(DType::F64);
        let img = Tensor::randn(0f64, 1f64, (1, 9, 32), &Device::Cpu).unwrap();
        let side = Tensor::randn(0f64, 1f64, (1, 3, 16), &Device::Cpu).unwrap();
        let perm = Tensor::from_vec(vec![2u32, 0, 1], 3, &Device::Cpu).unwrap();
        let shuffled = side.index_select(&perm, 1).unwrap().contiguous().unwrap();
        let a: Vec<f64> = f.forward(&img, Some(&side)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = f.forward(&img, Some(&shuffled)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (_, f) = fim(DType::F32);
        let img = Tensor::randn(0f32, 1f32, (1, 9, 32), &Device::Cpu).unwrap();
        let bad = Tensor::randn(0f32, 1f32, (1, 3, 8), &Device::Cpu).unwrap();
        assert!(f.forward(&img, Some(&bad)).is_err());
    }
}
