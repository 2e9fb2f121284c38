//! Mask-to-bbox conversion, square cropping and exploration grids.

use super::DataError;
use image::{GrayImage, Rgb, RgbImage};

/// Default spacing between exploration points, meters.
pub const DEFAULT_SPACING_M: f64 = 0.30;

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub row_min: u32,
    pub col_min: u32,
    pub row_max: u32,
    pub col_max: u32,
}

impl BBox {
    pub fn height(&self) -> u32 {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> u32 {
        self.col_max - self.col_min + 1
    }
}

/// Tightest axis-aligned box covering all set pixels (nonzero = set).
pub fn mask_to_bbox(mask: &GrayImage) -> Result<BBox, DataError> {
    let mut bbox: Option<BBox> = None;
    for (x, y, p) in mask.enumerate_pixels() {
        if p.0[0] == 0 {
            continue;
        }
        bbox = Some(match bbox {
            None => BBox {
                row_min: y,
                col_min: x,
                row_max: y,
                col_max: x,
            },
            Some(b) => BBox {
                row_min: b.row_min.min(y),
                col_min: b.col_min.min(x),
                row_max: b.row_max.max(y),
                col_max: b.col_max.max(x),
            },
        });
    }
    bbox.ok_or(DataError::EmptyMask)
}

/// Cuts a square window matching the longer bbox side, centered on the bbox
/// center; pixels outside the source image come out black.
pub fn crop_square(image: &RgbImage, bbox: &BBox) -> Result<RgbImage, DataError> {
    let (w, h) = (image.width(), image.height());
    if bbox.row_min > bbox.row_max
        || bbox.col_min > bbox.col_max
        || bbox.row_max >= h
        || bbox.col_max >= w
    {
        return Err(DataError::BBoxOutOfBounds(*bbox, w, h));
    }
    let side = bbox.width().max(bbox.height());
    // Window start so the bbox center and window center coincide
    // (floor division keeps a half-pixel bias consistent on both axes).
    let row0 = (bbox.row_min + bbox.row_max + 1) as i64 - side as i64;
    let col0 = (bbox.col_min + bbox.col_max + 1) as i64 - side as i64;
    let row0 = row0.div_euclid(2);
    let col0 = col0.div_euclid(2);

    let mut out = RgbImage::from_pixel(side, side, Rgb([0, 0, 0]));
    for oy in 0..side {
        let sy = row0 + oy as i64;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for ox in 0..side {
            let sx = col0 + ox as i64;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            out.put_pixel(ox, oy, *image.get_pixel(sx as u32, sy as u32));
        }
    }
    Ok(out)
}

/// 2D free-space map; `true` cells are free.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    /// Indexed `[row][col]`, row = y axis, col = x axis.
    pub cells: ndarray::Array2<bool>,
    /// Meters per cell.
    pub resolution: f64,
    /// World coordinates of the grid corner at cell (0, 0), meters.
    pub origin: [f64; 2],
}

impl OccupancyGrid {
    pub fn new(cells: ndarray::Array2<bool>, resolution: f64, origin: [f64; 2]) -> Result<Self, DataError> {
        if resolution <= 0.0 {
            return Err(DataError::InvalidParameter(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        Ok(Self {
            cells,
            resolution,
            origin,
        })
    }

    /// The cell containing world point `(x, y)`, if inside the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.origin[0]) / self.resolution).floor();
        let row = ((y - self.origin[1]) / self.resolution).floor();
        if col < 0.0 || row < 0.0 {
            return None;
        }
        let (rows, cols) = self.cells.dim();
        let (row, col) = (row as usize, col as usize);
        (row < rows && col < cols).then_some((row, col))
    }

    pub fn is_free(&self, x: f64, y: f64) -> bool {
        self.cell_at(x, y).map_or(false, |(r, c)| self.cells[(r, c)])
    }
}

/// Lattice of exploration points anchored at the grid origin with step
/// `spacing_m`, keeping only points over free cells.
pub fn exploration_points(grid: &OccupancyGrid, spacing_m: f64) -> Vec<[f64; 2]> {
    if spacing_m <= 0.0 {
        return Vec::new();
    }
    let (rows, cols) = grid.cells.dim();
    let max_x = grid.origin[0] + cols as f64 * grid.resolution;
    let max_y = grid.origin[1] + rows as f64 * grid.resolution;
    let mut points = Vec::new();
    let mut ky = 0u64;
    loop {
        let y = grid.origin[1] + ky as f64 * spacing_m;
        if y >= max_y {
            break;
        }
        let mut kx = 0u64;
        loop {
            let x = grid.origin[0] + kx as f64 * spacing_m;
            if x >= max_x {
                break;
            }
            if grid.is_free(x, y) {
                points.push([x, y]);
            }
            kx += 1;
        }
        ky += 1;
    }
    points
}
