//! Overlapping tile layout over a latent canvas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub tile_h: usize,
    pub tile_w: usize,
    pub stride: usize,
    /// Row-major, sorted, unique top-left corners.
    pub origins: Vec<(usize, usize)>,
    coverage: Vec<u32>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of tiles covering canvas pixel `(y, x)`.
    pub fn coverage(&self, y: usize, x: usize) -> u32 {
        self.coverage[y * self.canvas_w + x]
    }

    pub fn coverage_map(&self) -> &[u32] {
        &self.coverage
    }

    pub fn min_coverage(&self) -> u32 {
        self.coverage.iter().copied().min().unwrap_or(0)
    }
}

fn axis_origins(canvas: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + tile <= canvas)
        .collect();
    let last = *origins.last().expect("tile fits in canvas");
    if last + tile < canvas {
        origins.push(canvas - tile);
    }
    origins
}

/// Regular grid with the given stride; a final tile clamped flush to the edge
/// is appended per axis when the regular origins leave a border uncovered.
pub fn plan_tiles(
    canvas_h: usize,
    canvas_w: usize,
    tile_h: usize,
    tile_w: usize,
    stride: usize,
) -> Result<TileGrid> {
    if tile_h == 0 || tile_w == 0 {
        return Err(Error::arg("tile dimensions must be positive"));
    }
    if tile_h > canvas_h || tile_w > canvas_w {
        return Err(Error::arg(format!(
            "tile {tile_h}x{tile_w} larger than canvas {canvas_h}x{canvas_w}"
        )));
    }
    if stride == 0 || stride > tile_h.min(tile_w) {
        return Err(Error::arg(format!(
            "stride {stride} must lie in [1, {}]",
            tile_h.min(tile_w)
        )));
    }
    let rows = axis_origins(canvas_h, tile_h, stride);
    let cols = axis_origins(canvas_w, tile_w, stride);
    let origins: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let mut coverage = vec![0u32; canvas_h * canvas_w];
    for &(r, c) in &origins {
        for y in r..r + tile_h {
            for v in &mut coverage[y * canvas_w + c..y * canvas_w + c + tile_w] {
                *v += 1;
            }
        }
    }
    Ok(TileGrid {
        canvas_h,
        canvas_w,
        tile_h,
        tile_w,
        stride,
        origins,
        coverage,
    })
}
