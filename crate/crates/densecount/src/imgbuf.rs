//! Dense RGB image buffer used throughout the pipeline.
//!
//! Pixels are `f32` in `[0, 1]`, stored row-major in HWC order. Geometry
//! helpers (resize, crop, flips) operate in a pixel-center coordinate
//! convention: the sample point for output pixel `i` at scale `s` is
//! `(i + 0.5) * s - 0.5`, matching the usual align-corners=false bilinear
//! resampling.

use crate::error::{Error, Result};
use candle_core::{DType, Device, Tensor};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    data: Vec<f32>, // len = height * width * 3, HWC
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                img.put(r, c, px);
            }
        }
        img
    }

    pub fn constant(height: usize, width: usize, value: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                format!("{}x{}x3 = {} values", height, width, height * width * 3),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, row: usize, col: usize, px: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }

    /// Bilinear sample at fractional (row, col), clamped at the borders.
    pub fn sample(&self, row: f64, col: f64) -> [f32; 3] {
        let r0f = row.floor();
        let c0f = col.floor();
        let fr = (row - r0f) as f32;
        let fc = (col - c0f) as f32;
        let clamp_r = |r: f64| (r.max(0.0) as usize).min(self.height - 1);
        let clamp_c = |c: f64| (c.max(0.0) as usize).min(self.width - 1);
        let r0 = clamp_r(r0f);
        let r1 = clamp_r(r0f + 1.0);
        let c0 = clamp_c(c0f);
        let c1 = clamp_c(c0f + 1.0);
        let p00 = self.get(r0, c0);
        let p01 = self.get(r0, c1);
        let p10 = self.get(r1, c0);
        let p11 = self.get(r1, c1);
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            let top = p00[ch] * (1.0 - fc) + p01[ch] * fc;
            let bot = p10[ch] * (1.0 - fc) + p11[ch] * fc;
            out[ch] = top * (1.0 - fr) + bot * fr;
        }
        out
    }

    /// Bilinear resize to `(new_h, new_w)`.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Self {
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let sr = self.height as f64 / new_h as f64;
        let sc = self.width as f64 / new_w as f64;
        Self::from_fn(new_h, new_w, |r, c| {
            let src_r = (r as f64 + 0.5) * sr - 0.5;
            let src_c = (c as f64 + 0.5) * sc - 0.5;
            self.sample(src_r, src_c)
        })
    }

    /// Crop the axis-aligned float region `[y, y+side_h) x [x, x+side_w)` and
    /// resample it to `(out_h, out_w)`.
    pub fn crop_resize(&self, y: f64, x: f64, side_h: f64, side_w: f64, out_h: usize, out_w: usize) -> Self {
        let sr = side_h / out_h as f64;
        let sc = side_w / out_w as f64;
        Self::from_fn(out_h, out_w, |r, c| {
            let src_r = y + (r as f64 + 0.5) * sr - 0.5;
            let src_c = x + (c as f64 + 0.5) * sc - 0.5;
            self.sample(src_r, src_c)
        })
    }

    /// Integer-aligned crop; the region must lie within bounds.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::Invalid(format!(
                "crop {}x{}+{}+{} exceeds image {}x{}",
                h, w, row, col, self.height, self.width
            )));
        }
        let mut out = Self::new(h, w);
        for r in 0..h {
            for c in 0..w {
                out.put(r, c, self.get(row + r, col + c));
            }
        }
        Ok(out)
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    /// Rotate by `k` quarter turns counter-clockwise. Requires a square image
    /// for k odd.
    pub fn rot90(&self, k: usize) -> Self {
        match k % 4 {
            0 => self.clone(),
            1 => Self::from_fn(self.width, self.height, |r, c| self.get(c, self.width - 1 - r)),
            2 => Self::from_fn(self.height, self.width, |r, c| {
                self.get(self.height - 1 - r, self.width - 1 - c)
            }),
            _ => Self::from_fn(self.width, self.height, |r, c| self.get(self.height - 1 - c, r)),
        }
    }

    /// Circular shift by (dy, dx); pixels wrap around.
    pub fn circular_shift(&self, dy: usize, dx: usize) -> Self {
        Self::from_fn(self.height, self.width, |r, c| {
            self.get((r + self.height - dy % self.height) % self.height, (c + self.width - dx % self.width) % self.width)
        })
    }

    /// Pad on the right with zeros to reach `new_w` columns.
    pub fn pad_right(&self, new_w: usize) -> Self {
        let mut out = Self::new(self.height, new_w.max(self.width));
        for r in 0..self.height {
            for c in 0..self.width {
                out.put(r, c, self.get(r, c));
            }
        }
        out
    }

    /// Convert to a (1, 3, H, W) tensor, optionally normalizing channels.
    pub fn to_tensor(&self, norm: Option<&ChannelNorm>, dtype: DType, dev: &Device) -> Result<Tensor> {
        let n = self.height * self.width;
        let mut chw = vec![0f32; 3 * n];
        for r in 0..self.height {
            for c in 0..self.width {
                let px = self.get(r, c);
                for ch in 0..3 {
                    let v = match norm {
                        Some(nrm) => (px[ch] - nrm.mean[ch]) / nrm.std[ch],
                        None => px[ch],
                    };
                    chw[ch * n + r * self.width + c] = v;
                }
            }
        }
        let t = Tensor::from_vec(chw, (1, 3, self.height, self.width), dev)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let mut out = Self::new(h as usize, w as usize);
        for (c, r, px) in img.enumerate_pixels() {
            out.put(r as usize, c as usize, [
                f32::from(px.0[0]) / 255.0,
                f32::from(px.0[1]) / 255.0,
                f32::from(px.0[2]) / 255.0,
            ]);
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for r in 0..self.height {
            for c in 0..self.width {
                let px = self.get(r, c);
                let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(c as u32, r as u32, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
            }
        }
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Per-channel normalization applied at the model boundary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelNorm {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_exact() {
        let img = ImageBuf::from_fn(5, 7, |r, c| [r as f32 * 0.1, c as f32 * 0.05, 0.3]);
        assert_eq!(img.resize(5, 7), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageBuf::constant(8, 8, [0.25, 0.5, 0.75]);
        let up = img.resize(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                let px = up.get(r, c);
                assert!((px[0] - 0.25).abs() < 1e-6);
                assert!((px[1] - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hflip_involution() {
        let img = ImageBuf::from_fn(4, 6, |r, c| [(r * 6 + c) as f32 / 24.0, 0.0, 0.0]);
        assert_eq!(img.hflip().hflip(), img);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let img = ImageBuf::from_fn(5, 5, |r, c| [(r * 5 + c) as f32 / 25.0, 0.1, 0.2]);
        let mut out = img.clone();
        for _ in 0..4 {
            out = out.rot90(1);
        }
        assert_eq!(out, img);
    }

    #[test]
    fn tensor_layout_is_chw() {
        let mut img = ImageBuf::new(2, 2);
        img.put(0, 1, [1.0, 0.5, 0.25]);
        let t = img.to_tensor(None, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 2]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        // channel 0 plane: [0, 1, 0, 0]
        assert_eq!(&v[0..4], &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(v[4 + 1], 0.5);
    }
}
