//! Density-map ground truth.
//!
//! Each dot annotation contributes one Gaussian kernel, truncated to a square
//! window of half-width `4 * sigma` and renormalized to unit mass over the
//! pixels that fall inside the image, so the spatial sum of the map equals
//! the dot count even when dots sit on the boundary.

use crate::data::DotAnnotation;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Prediction,
}

/// A dense float grid whose spatial sum is the object count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    grid: Vec<f64>, // row-major
    pub provenance: Provenance,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, provenance: Provenance) -> Self {
        Self {
            height,
            width,
            grid: vec![0.0; height * width],
            provenance,
        }
    }

    pub fn from_grid(height: usize, width: usize, grid: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape(
                format!("{}x{} = {} cells", height, width, height * width),
                format!("{} cells", grid.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            grid,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.width + col]
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        self.grid[row * self.width + col] += v;
    }

    /// Spatial sum; for ground-truth maps this is the object count.
    pub fn sum(&self) -> f64 {
        self.grid.iter().sum()
    }

    pub fn values_f32(&self) -> Vec<f32> {
        self.grid.iter().map(|&v| v as f32).collect()
    }
}

/// Build the ground-truth density map for a dot set.
///
/// Every dot must lie inside `[0, W) x [0, H)`; out-of-bounds dots reject the
/// whole sample with a diagnostic rather than silently losing mass.
pub fn generate_density_map(dots: &[DotAnnotation], height: usize, width: usize, sigma: f64) -> Result<DensityMap> {
    if sigma <= 0.0 {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut map = DensityMap::zeros(height, width, Provenance::GroundTruth);
    let radius = (4.0 * sigma).ceil() as i64;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    for (i, dot) in dots.iter().enumerate() {
        if !dot.in_bounds(height, width) {
            return Err(Error::Invalid(format!(
                "dot #{i} at ({}, {}) outside {height}x{width} grid",
                dot.x, dot.y
            )));
        }
        let cx = dot.x;
        let cy = dot.y;
        let r0 = ((cy.floor() as i64) - radius).max(0) as usize;
        let r1 = ((cy.ceil() as i64) + radius).min(height as i64 - 1) as usize;
        let c0 = ((cx.floor() as i64) - radius).max(0) as usize;
        let c1 = ((cx.ceil() as i64) + radius).min(width as i64 - 1) as usize;
        // two passes: accumulate the in-image kernel mass, then deposit
        let mut mass = 0.0f64;
        for r in r0..=r1 {
            let dy = r as f64 - cy;
            for c in c0..=c1 {
                let dx = c as f64 - cx;
                mass += (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
            }
        }
        debug_assert!(mass > 0.0);
        let inv_mass = 1.0 / mass;
        for r in r0..=r1 {
            let dy = r as f64 - cy;
            for c in c0..=c1 {
                let dx = c as f64 - cx;
                map.add(r, c, (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp() * inv_mass);
            }
        }
    }
    Ok(map)
}

/// Persist a density map: 16-byte header (magic "DMAP", u32 H, u32 W, u32
/// reserved), then `H*W` little-endian f32 values, row-major.
pub fn write_dmap(path: &Path, map: &DensityMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(DMAP_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(map.height as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(map.width as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(0).map_err(io_err)?;
    for &v in &map.grid {
        w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_dmap(path: &Path) -> Result<DensityMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != DMAP_MAGIC {
        return Err(Error::Invalid(format!(
            "{} is not a density-map file (bad magic {magic:?})",
            path.display()
        )));
    }
    let height = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let width = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let _reserved = r.read_u32::<LittleEndian>().map_err(io_err)?;
    let mut grid = vec![0.0f64; height * width];
    for cell in &mut grid {
        *cell = f64::from(r.read_f32::<LittleEndian>().map_err(io_err)?);
    }
    DensityMap::from_grid(height, width, grid, Provenance::GroundTruth)
}
