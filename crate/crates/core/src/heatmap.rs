//! Regional-attention heatmaps: the per-region weights reshaped to the
//! encoder grid, upscaled to image size and stretched to 8 bits.

use serde::{Deserialize, Serialize};

use crate::data::image::{resize, ImageBuffer};
use crate::error::{Error, Result};

/// Alpha export: one row of region weights per image plus the grid extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaExport {
    pub alpha: Vec<Vec<f64>>,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl AlphaExport {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid_height * self.grid_width;
        for (b, row) in self.alpha.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Contract(format!(
                    "alpha row {b} has {} weights for a {}x{} grid",
                    row.len(),
                    self.grid_height,
                    self.grid_width
                )));
            }
        }
        Ok(())
    }
}

fn clamp_at(grid: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    let x = x.clamp(0, w as isize - 1) as usize;
    let y = y.clamp(0, h as isize - 1) as usize;
    grid[y * w + x]
}

/// Bilinear upscale of an `h × w` grid (row-major) to `out_w × out_h`,
/// sampling at pixel centres with edges extended.
pub fn upscale(grid: &[f64], h: usize, w: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let (sx, sy) = (w as f64 / out_w as f64, h as f64 / out_h as f64);
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        for x in 0..out_w {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let top = clamp_at(grid, w, h, xi, yi) * (1.0 - tx) + clamp_at(grid, w, h, xi + 1, yi) * tx;
            let bot = clamp_at(grid, w, h, xi, yi + 1) * (1.0 - tx) + clamp_at(grid, w, h, xi + 1, yi + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Grayscale heatmap. A constant alpha gives a constant (black) map.
pub fn heatmap(
    alpha: &[f64],
    grid_height: usize,
    grid_width: usize,
    width: usize,
    height: usize,
) -> Result<ImageBuffer> {
    if alpha.len() != grid_height * grid_width {
        return Err(Error::Contract(format!(
            "alpha has {} weights for a {grid_height}x{grid_width} grid",
            alpha.len()
        )));
    }
    if width == 0 || height == 0 || alpha.is_empty() {
        return Err(Error::Contract("heatmap needs a non-empty grid and image".into()));
    }
    let up = upscale(alpha, grid_height, grid_width, width, height);
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = up
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    ImageBuffer::new(width, height, 1, data)
}

/// 50/50 blend of the input (as RGB) with a blue-to-red rendering of `heat`.
pub fn overlay(image: &ImageBuffer, heat: &ImageBuffer) -> Result<ImageBuffer> {
    if heat.channels != 1 {
        return Err(Error::Contract("overlay expects a single-channel heatmap".into()));
    }
    let base = resize(image, heat.width, heat.height)?;
    let mut out = ImageBuffer::filled(heat.width, heat.height, 3, 0);
    for y in 0..heat.height {
        for x in 0..heat.width {
            let h = heat.get(x, y, 0) as u16;
            let colour = [h, 0, 255 - h];
            for (c, &col) in colour.iter().enumerate() {
                let src = base.get(x, y, if base.channels == 3 { c } else { 0 }) as u16;
                out.set(x, y, c, (src + col).div_ceil(2) as u8);
            }
        }
    }
    Ok(out)
}
