use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView1};

use crate::encoders::{similarity, PatchGrid};
use crate::error::{Error, Result};

/// Cosine of every cell against `query`, `h x w`.
pub fn similarity_map(grid: &PatchGrid, query: ArrayView1<f64>) -> Result<Array2<f64>> {
    let vals = grid
        .data
        .rows()
        .into_iter()
        .map(|r| similarity(r, query))
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((grid.h, grid.w), vals).expect("one value per cell"))
}

/// Cosine of every cell against the cell at `(y, x)`.
pub fn anchor_similarity_map(grid: &PatchGrid, anchor: (usize, usize)) -> Result<Array2<f64>> {
    let (y, x) = anchor;
    if y >= grid.h || x >= grid.w {
        return Err(Error::invalid(format!("anchor {anchor:?} outside {}x{} grid", grid.h, grid.w)));
    }
    similarity_map(grid, grid.cell(y, x))
}

/// Blue (−1) through white (0) to red (+1).
fn color(v: f64) -> Rgb<u8> {
    let t = v.clamp(-1.0, 1.0);
    let c = |x: f64| (x * 255.0).round() as u8;
    if t >= 0.0 {
        Rgb([255, c(1.0 - t), c(1.0 - t)])
    } else {
        Rgb([c(1.0 + t), c(1.0 + t), 255])
    }
}

/// Renders a cosine map with `cell_px` pixels per cell; `marker` outlines
/// one cell in black.
pub fn render_heatmap(map: &Array2<f64>, cell_px: u32, marker: Option<(usize, usize)>) -> RgbImage {
    let (h, w) = map.dim();
    let mut img = RgbImage::new(w as u32 * cell_px, h as u32 * cell_px);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (i, j) = ((y / cell_px) as usize, (x / cell_px) as usize);
        *px = color(map[[i, j]]);
        if marker == Some((i, j)) {
            let (ly, lx) = (y % cell_px, x % cell_px);
            if ly == 0 || lx == 0 || ly == cell_px - 1 || lx == cell_px - 1 {
                *px = Rgb([0, 0, 0]);
            }
        }
    }
    img
}

pub fn save_heatmap(map: &Array2<f64>, cell_px: u32, marker: Option<(usize, usize)>, path: &Path) -> Result<()> {
    render_heatmap(map, cell_px, marker)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
