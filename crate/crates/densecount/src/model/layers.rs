//! Shared network building blocks: attention, transformer blocks, fixed
//! sinusoidal position tables and the constant matrices implementing 2×
//! bilinear upsampling as matrix products (keeping it differentiable).

use crate::error::{Error, Result};
use crate::model::store::{Init, ParamStore};
use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::softmax;
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module};

const LN_EPS: f64 = 1e-6;

/// Layer normalization over the last axis. candle-nn's fused kernel rejects
/// F64 input, which the finite-difference gradient tests rely on, so the
/// computation is spelled out with ordinary tensor ops.
#[derive(Debug, Clone)]
pub struct Norm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for Norm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

pub fn linear(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
    let w = store.param(&format!("{name}.weight"), &[out_dim, in_dim], Init::TruncNormal(0.02))?;
    let b = if bias {
        Some(store.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

pub fn layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<Norm> {
    let w = store.param(&format!("{name}.weight"), &[dim], Init::Ones)?;
    let b = store.param(&format!("{name}.bias"), &[dim], Init::Zeros)?;
    Ok(Norm { weight: w, bias: b, eps: LN_EPS })
}

pub fn conv2d(
    store: &mut ParamStore,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let w = store.param(
        &format!("{name}.weight"),
        &[out_c, in_c, kernel, kernel],
        Init::TruncNormal(0.02),
    )?;
    let b = store.param(&format!("{name}.bias"), &[out_c], Init::Zeros)?;
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Conv2dConfig::default()
    };
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// (B, N, D) → (B, heads, N, D/heads)
fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = t.dims3()?;
    Ok(t.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// (B, heads, N, D/heads) → (B, N, D)
fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let (b, h, n, hd) = t.dims4()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, n, h * hd))?)
}

fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let head_dim = qh.dim(3)?;
    let scale = (head_dim as f64).powf(-0.5);
    let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * scale)?;
    // candle-nn's fused `softmax_last_dim` is a forward-only custom op: it
    // silently detaches the attention weights from the autograd graph, so the
    // q/k projections would never receive gradients. The composed `softmax`
    // builds the same max-subtracted computation from primitive ops and
    // backpropagates correctly.
    let weights = softmax(&scores, D::Minus1)?;
    merge_heads(&weights.matmul(&vh)?)
}

/// Standard multi-head attention with its own q/k/v/output projections.
/// `forward(x, x)` is self-attention; distinct inputs give cross-attention.
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(store, &format!("{name}.q"), dim, dim, true)?,
            k: linear(store, &format!("{name}.k"), dim, dim, true)?,
            v: linear(store, &format!("{name}.v"), dim, dim, true)?,
            o: linear(store, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(kv)?;
        let v = self.v.forward(kv)?;
        let out = scaled_dot_attention(&q, &k, &v, self.heads)?;
        Ok(self.o.forward(&out)?)
    }
}

/// Cross-attention whose keys and values are supplied by the caller already
/// projected into model width; only the query and output projections are
/// per-layer parameters. Lets a single shared key/value projection serve a
/// whole decoder stack.
pub struct ExternalKvAttention {
    q: Linear,
    o: Linear,
    heads: usize,
}

impl ExternalKvAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: linear(store, &format!("{name}.q"), dim, dim, true)?,
            o: linear(store, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let out = scaled_dot_attention(&q, k, v, self.heads)?;
        Ok(self.o.forward(&out)?)
    }
}

pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(store, &format!("{name}.fc1"), dim, dim * 4, true)?,
            fc2: linear(store, &format!("{name}.fc2"), dim * 4, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)?)
    }
}

/// Pre-norm encoder block: x + attn(ln(x)), then x + mlp(ln(x)).
pub struct EncoderBlock {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: layer_norm(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: layer_norm(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Pre-norm decoder block: self-attention over the query stream, then
/// cross-attention against externally supplied keys/values, then MLP.
pub struct CrossBlock {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross: ExternalKvAttention,
    ln3: Norm,
    mlp: Mlp,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: layer_norm(store, &format!("{name}.ln1"), dim)?,
            self_attn: Attention::new(store, &format!("{name}.self"), dim, heads)?,
            ln2: layer_norm(store, &format!("{name}.ln2"), dim)?,
            cross: ExternalKvAttention::new(store, &format!("{name}.cross"), dim, heads)?,
            ln3: layer_norm(store, &format!("{name}.ln3"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h)?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross.forward(&h, k, v)?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

fn sincos_1d(pos: f64, dim: usize) -> Vec<f64> {
    // half sines then half cosines over a geometric frequency ladder
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * omega).sin();
        out[half + i] = (pos * omega).cos();
    }
    out
}

/// Fixed 2D sinusoidal position table for a `side × side` token grid in
/// row-major order: the first `dim/2` channels encode the row, the rest the
/// column. Returns shape (1, side², dim) for broadcasting over a batch.
pub fn sincos_2d(side: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "positional dim {dim} must be divisible by 4"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(side * side * dim);
    for r in 0..side {
        let row = sincos_1d(r as f64, half);
        for c in 0..side {
            data.extend_from_slice(&row);
            data.extend_from_slice(&sincos_1d(c as f64, half));
        }
    }
    Ok(Tensor::from_vec(data, (1, side * side, dim), device)?.to_dtype(dtype)?)
}

/// Interpolation weights for one axis of a 2× bilinear upsample without
/// corner alignment: output sample i reads source coordinate (i+0.5)/2−0.5.
fn upsample_axis_weights(n: usize) -> Vec<f64> {
    let m = 2 * n;
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        let src = (i as f64 + 0.5) / 2.0 - 0.5;
        if src <= 0.0 {
            w[i * n] = 1.0;
        } else if src >= (n - 1) as f64 {
            w[i * n + (n - 1)] = 1.0;
        } else {
            let lo = src.floor() as usize;
            let f = src - src.floor();
            w[i * n + lo] = 1.0 - f;
            w[i * n + lo + 1] = f;
        }
    }
    w
}

/// Constant matrices (L, R) such that L · X · R doubles both spatial axes of
/// X bilinearly: L is (2n, n), R is (n, 2n).
pub fn upsample2x_matrices(n: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let w = upsample_axis_weights(n);
    let l = Tensor::from_vec(w.clone(), (2 * n, n), device)?.to_dtype(dtype)?;
    let r = Tensor::from_vec(w, (2 * n, n), device)?.to_dtype(dtype)?.t()?.contiguous()?;
    Ok((l, r))
}

/// Apply the cached upsample matrices over the trailing two dims of
/// (B, C, H, W).
pub fn upsample2x(x: &Tensor, l: &Tensor, r: &Tensor) -> Result<Tensor> {
    let up_rows = l.broadcast_matmul(x)?;
    Ok(up_rows.broadcast_matmul(r)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu() -> Device {
        Device::Cpu
    }

    #[test]
    fn attention_output_shape_and_determinism() {
        let mut s = ParamStore::new(0, DType::F32, cpu());
        let attn = Attention::new(&mut s, "a", 16, 4).unwrap();
        let x = Tensor::randn(0f32, 1f32, (2, 5, 16), &cpu()).unwrap();
        let y1 = attn.forward(&x, &x).unwrap();
        let y2 = attn.forward(&x, &x).unwrap();
        assert_eq!(y1.dims(), &[2, 5, 16]);
        let a: Vec<f32> = y1.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = y2.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_attention_is_permutation_invariant_in_kv() {
        let mut s = ParamStore::new(1, DType::F64, cpu());
        let attn = ExternalKvAttention::new(&mut s, "x", 8, 2).unwrap();
        let x = Tensor::randn(0f64, 1f64, (1, 3, 8), &cpu()).unwrap();
        let k = Tensor::randn(0f64, 1f64, (1, 4, 8), &cpu()).unwrap();
        let v = Tensor::randn(0f64, 1f64, (1, 4, 8), &cpu()).unwrap();
        let perm = Tensor::from_vec(vec![2u32, 0, 3, 1], 4, &cpu()).unwrap();
        let kp = k.index_select(&perm, 1).unwrap();
        let vp = v.index_select(&perm, 1).unwrap();
        let y: Vec<f64> = attn.forward(&x, &k, &v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let yp: Vec<f64> = attn.forward(&x, &kp, &vp).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in y.iter().zip(&yp) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn sincos_rows_are_unit_scaled_and_distinct() {
        let pe = sincos_2d(4, 16, DType::F64, &cpu()).unwrap();
        assert_eq!(pe.dims(), &[1, 16, 16]);
        let v: Vec<f64> = pe.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0 + 1e-12));
        // all 16 positions get distinct encodings
        let rows: Vec<&[f64]> = v.chunks(16).collect();
        for i in 0..16 {
            for j in (i + 1)..16 {
                assert_ne!(rows[i], rows[j], "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn upsample_doubles_and_preserves_constants() {
        let (l, r) = upsample2x_matrices(3, DType::F64, &cpu()).unwrap();
        let x = Tensor::full(2.5f64, (1, 1, 3, 3), &cpu()).unwrap();
        let y = upsample2x(&x, &l, &r).unwrap();
        assert_eq!(y.dims(), &[1, 1, 6, 6]);
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        for x in v {
            assert!((x - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_matches_manual_bilinear_on_a_ramp() {
        let (l, r) = upsample2x_matrices(2, DType::F64, &cpu()).unwrap();
        let x = Tensor::from_vec(vec![0.0f64, 1.0, 2.0, 3.0], (1, 1, 2, 2), &cpu()).unwrap();
        let y: Vec<f64> = upsample2x(&x, &l, &r)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        // rows: src coords [-0.25, 0.25, 0.75, 1.25] → weights clamp at edges
        let expect = [
            0.0, 0.25, 0.75, 1.0,
            0.5, 0.75, 1.25, 1.5,
            1.5, 1.75, 2.25, 2.5,
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn upsample_rows_are_convex_weights() {
        for n in [2usize, 3, 5, 12, 24] {
            let w = upsample_axis_weights(n);
            for i in 0..2 * n {
                let row = &w[i * n..(i + 1) * n];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|x| *x >= 0.0));
            }
        }
    }
}
