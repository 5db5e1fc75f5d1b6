//! Progressive density decoder: interaction tokens are reshaped onto their
//! spatial grid, then repeatedly convolved and bilinearly doubled until the
//! input resolution is restored; a 1×1 regressor produces the density
//! channel. The output is intentionally unclamped — training relies on raw
//! gradients, and counts are sums over raw values.

use crate::error::{Error, Result};
use crate::model::layers::{conv2d, upsample2x, upsample2x_matrices};
use crate::model::store::ParamStore;
use candle_core::Tensor;
use candle_nn::{Conv2d, Module};

pub struct DensityDecoder {
    convs: Vec<Conv2d>,
    regressor: Conv2d,
    ups: Vec<(Tensor, Tensor)>, // per-stage row/col interpolation matrices
    grid: usize,
    in_dim: usize,
}

impl DensityDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        grid: usize,
        in_dim: usize,
        hidden: usize,
        blocks: usize,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(blocks);
        let mut ups = Vec::with_capacity(blocks);
        let mut side = grid;
        for i in 0..blocks {
            let in_c = if i == 0 { in_dim } else { hidden };
            convs.push(conv2d(store, &format!("{prefix}.conv{i}"), in_c, hidden, 3, 1, 1)?);
            ups.push(upsample2x_matrices(side, store.dtype(), &store.device().clone())?);
            side *= 2;
        }
        let regressor = conv2d(store, &format!("{prefix}.regressor"), hidden, 1, 1, 1, 0)?;
        Ok(Self { convs, regressor, ups, grid, in_dim })
    }

    /// (B, M, in_dim) tokens on a g×g grid → (B, g·2^blocks, g·2^blocks).
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, m, d) = tokens.dims3()?;
        if m != self.grid * self.grid {
            return Err(Error::shape(
                format!("{} tokens ({g}x{g} grid)", self.grid * self.grid, g = self.grid),
                format!("{m}"),
            ));
        }
        if d != self.in_dim {
            return Err(Error::shape(format!("token width {}", self.in_dim), format!("{d}")));
        }
        let mut x = tokens
            .reshape((b, self.grid, self.grid, d))?
            .permute([0, 3, 1, 2])?
            .contiguous()?;
        for (conv, (l, r)) in self.convs.iter().zip(&self.ups) {
            x = conv.forward(&x)?.relu()?;
            x = upsample2x(&x, l, r)?;
        }
        let out = self.regressor.forward(&x)?;
        Ok(out.squeeze(1)?)
    }
}
