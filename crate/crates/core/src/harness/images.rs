//! Binary PPM output for image grids and heatmaps.

use std::path::Path;

use crate::error::{invalid, Result};

use super::data::{IMAGE_CHANNELS, IMAGE_DIM, IMAGE_SIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

fn to_byte(v: f64) -> u8 {
    ((v + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles flattened 16x16x3 images (values in [-0.5, 0.5]) into a grid,
/// each pixel enlarged `scale` times.
pub fn image_grid(rows: &[&[f64]], columns: usize, scale: usize) -> Result<RgbImage> {
    if columns == 0 || scale == 0 || rows.iter().any(|r| r.len() != IMAGE_DIM) {
        return Err(invalid("image_grid needs 16x16x3 rows, columns > 0 and scale > 0"));
    }
    let tile = IMAGE_SIDE * scale;
    let grid_rows = rows.len().div_ceil(columns);
    let mut img = RgbImage::new(columns * tile, grid_rows.max(1) * tile);
    for (n, x) in rows.iter().enumerate() {
        let (oy, ox) = ((n / columns) * tile, (n % columns) * tile);
        for r in 0..tile {
            for c in 0..tile {
                let base = ((r / scale) * IMAGE_SIDE + c / scale) * IMAGE_CHANNELS;
                img.put(
                    oy + r,
                    ox + c,
                    [to_byte(x[base]), to_byte(x[base + 1]), to_byte(x[base + 2])],
                );
            }
        }
    }
    Ok(img)
}

/// Grayscale heatmap of a row-major matrix, normalized by its maximum.
pub fn heatmap(values: &[Vec<f64>], cell: usize) -> Result<RgbImage> {
    let cols = values.first().map(Vec::len).unwrap_or(0);
    if values.is_empty() || cols == 0 || cell == 0 || values.iter().any(|r| r.len() != cols) {
        return Err(invalid("heatmap needs a non-empty rectangular matrix"));
    }
    let max = values.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut img = RgbImage::new(cols * cell, values.len() * cell);
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let g = if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            for r in 0..cell {
                for c in 0..cell {
                    img.put(i * cell + r, j * cell + c, [g, g, g]);
                }
            }
        }
    }
    Ok(img)
}
