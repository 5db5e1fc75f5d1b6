//! Convolutional exemplar encoder: four stride-2 3×3 convolutions with ReLU
//! and a channel ladder ending at the exemplar width (64→128→256→512 at the
//! default 512), global-average-pooled into one vector per exemplar crop.

use crate::error::{Error, Result};
use crate::model::layers::conv2d;
use crate::model::store::ParamStore;
use candle_core::Tensor;
use candle_nn::{Conv2d, Module};

pub struct ExemplarEncoder {
    convs: Vec<Conv2d>,
    out_dim: usize,
}

impl ExemplarEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, out_dim: usize) -> Result<Self> {
        if out_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "exemplar width {out_dim} must be divisible by 8"
            )));
        }
        let channels = [3, out_dim / 8, out_dim / 4, out_dim / 2, out_dim];
        let convs = (0..4)
            .map(|i| {
                conv2d(
                    store,
                    &format!("{prefix}.conv{i}"),
                    channels[i],
                    channels[i + 1],
                    3,
                    2,
                    1,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, out_dim })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// (K, 3, R, R) exemplar crops → (K, out_dim) pooled features.
    pub fn forward(&self, crops: &Tensor) -> Result<Tensor> {
        let (k, c, _, _) = crops.dims4()?;
        if k == 0 {
            return Err(Error::Invalid("exemplar batch is empty".into()));
        }
        if c != 3 {
            return Err(Error::shape("3 channels", format!("{c}")));
        }
        let mut x = crops.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x.mean(3)?.mean(2)?)
    }
}
