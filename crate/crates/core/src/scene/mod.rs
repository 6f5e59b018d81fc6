//! Images, raster-order patch tokenization, per-patch PSNR and the synthetic
//! road-scene generator.

mod generate;
pub mod io;

pub use generate::{generate_scene, SceneSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_PIXEL: f64 = 255.0;

/// PSNR above this is reported as this value before any averaging.
pub const PSNR_CAP_DB: f64 = 100.0;

/// RGB image, interleaved `(y, x, channel)`, values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "image must be non-empty, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for (dst, v) in self.pixels[i..i + 3].iter_mut().zip(rgb) {
            *dst = v.clamp(0.0, MAX_PIXEL);
        }
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|v| v.round().clamp(0.0, 255.0))
                .collect(),
        }
    }
}

/// Patch-grid geometry without pixel payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn for_image(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0
            || !height.is_multiple_of(patch_size)
            || !width.is_multiple_of(patch_size)
        {
            return Err(Error::contract(format!(
                "{width}x{height} image does not tile into {patch_size}px patches"
            )));
        }
        Ok(GridShape {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }
}

/// An image split into `rows × cols` square patches in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Each patch is `patch_size² × 3` values, `(y, x, channel)` order.
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            patch_size: self.patch_size,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` covered by raster index `i`.
    pub fn patch_rect(&self, i: usize) -> (usize, usize, usize, usize) {
        let (r, c) = (i / self.cols, i % self.cols);
        let ps = self.patch_size;
        (c * ps, r * ps, (c + 1) * ps, (r + 1) * ps)
    }
}

pub fn tokenize(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::contract("patch size must be positive"));
    }
    if !image.height.is_multiple_of(patch_size) {
        return Err(Error::contract(format!(
            "image height {} is not divisible by patch size {patch_size}",
            image.height
        )));
    }
    if !image.width.is_multiple_of(patch_size) {
        return Err(Error::contract(format!(
            "image width {} is not divisible by patch size {patch_size}",
            image.width
        )));
    }
    let (rows, cols) = (image.height / patch_size, image.width / patch_size);
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = Vec::with_capacity(patch_size * patch_size * 3);
            for y in r * patch_size..(r + 1) * patch_size {
                let start = (y * image.width + c * patch_size) * 3;
                p.extend_from_slice(&image.pixels[start..start + patch_size * 3]);
            }
            patches.push(p);
        }
    }
    Ok(PatchGrid {
        patch_size,
        rows,
        cols,
        patches,
    })
}

pub fn reassemble(grid: &PatchGrid) -> Result<Image> {
    let ps = grid.patch_size;
    if grid.patches.len() != grid.rows * grid.cols {
        return Err(Error::contract(format!(
            "grid {}x{} holds {} patches",
            grid.rows,
            grid.cols,
            grid.patches.len()
        )));
    }
    if let Some(p) = grid.patches.iter().find(|p| p.len() != ps * ps * 3) {
        return Err(Error::contract(format!(
            "patch has {} values, expected {}",
            p.len(),
            ps * ps * 3
        )));
    }
    let (h, w) = (grid.rows * ps, grid.cols * ps);
    let mut pixels = vec![0.0; h * w * 3];
    for (i, p) in grid.patches.iter().enumerate() {
        let (r, c) = (i / grid.cols, i % grid.cols);
        for dy in 0..ps {
            let dst = ((r * ps + dy) * w + c * ps) * 3;
            pixels[dst..dst + ps * 3].copy_from_slice(&p[dy * ps * 3..(dy + 1) * ps * 3]);
        }
    }
    Image::new(h, w, pixels)
}

/// PSNR in dB between two equally sized pixel blocks; `+∞` when identical.
pub fn patch_psnr(p: &[f64], p_hat: &[f64], max: f64) -> Result<f64> {
    if p.len() != p_hat.len() || p.is_empty() {
        return Err(Error::contract(format!(
            "patch_psnr: {} vs {} values",
            p.len(),
            p_hat.len()
        )));
    }
    if max <= 0.0 {
        return Err(Error::contract(format!(
            "patch_psnr: MAX must be positive, got {max}"
        )));
    }
    let mse = p
        .iter()
        .zip(p_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max * max / mse).log10())
}

/// Replaces the identical-patch sentinel (and anything above it) with the cap.
pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// Per-patch PSNR of two grids, capped at [`PSNR_CAP_DB`].
pub fn grid_psnr(a: &PatchGrid, b: &PatchGrid) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "grids hold {} and {} patches",
            a.len(),
            b.len()
        )));
    }
    a.patches
        .iter()
        .zip(&b.patches)
        .map(|(p, q)| patch_psnr(p, q, MAX_PIXEL).map(cap_psnr))
        .collect()
}

/// Detection box in pixel coordinates, top-left `(x1, y1)` to bottom-right `(x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ok = self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= width as f64
            && self.y2 <= height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "box {self:?} is degenerate or outside a {width}x{height} image"
            )))
        }
    }

    /// True when the open intersection with `[x0,x1) × [y0,y1)` has positive area.
    pub fn overlaps_rect(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
        self.x1 < x1 && self.x2 > x0 && self.y1 < y1 && self.y2 > y0
    }
}

/// Detection record; `ego_distance` and `in_path` exist only for synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub track_id: i64,
    pub name: String,
    pub class: i64,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_path: Option<bool>,
}
