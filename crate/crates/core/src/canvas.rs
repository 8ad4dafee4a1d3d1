//! Grayscale canvases, view windows, and image I/O.
//!
//! A [`Canvas`] stores row-major `f64` intensities in [0,1] with 1.0 =
//! fractal (foreground). `(0,0)` is the top-left pixel. A [`ViewWindow`]
//! maps world coordinates onto a square canvas; world y grows upward, so
//! rows run top-down while y runs bottom-up.
//!
//! PNG files follow the usual "dark shape on light paper" convention, so
//! reading and writing invert by default: PNG black ↦ intensity 1.0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ifs::Vec2;

/// Grayscale image with an attached supersampling factor.
///
/// `supersample` is bookkeeping: a canvas rendered at k× resolution ahead
/// of averaging carries k so downstream stages can check geometry. It does
/// not affect pixel storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    width: usize,
    height: usize,
    supersample: usize,
    pub pixels: Vec<f64>,
}

impl Canvas {
    /// An all-zero (background) canvas.
    pub fn zeros(width: usize, height: usize, supersample: usize) -> Canvas {
        assert!(width > 0 && height > 0 && supersample > 0);
        Canvas {
            width,
            height,
            supersample,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Canvas> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{}×{} canvas needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(Canvas {
            width,
            height,
            supersample: 1,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn supersample(&self) -> usize {
        self.supersample
    }

    pub fn with_supersample(mut self, supersample: usize) -> Canvas {
        assert!(supersample > 0);
        self.supersample = supersample;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Fraction of pixels at or above `tau`.
    pub fn foreground_fraction(&self, tau: f64) -> f64 {
        let hits = self.pixels.iter().filter(|&&v| v >= tau).count();
        hits as f64 / self.pixels.len() as f64
    }

    /// Inclusive pixel bounding box of all values ≥ `tau`, as
    /// `(x0, y0, x1, y1)`; `None` when nothing clears the threshold.
    pub fn foreground_bbox(&self, tau: f64) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) >= tau {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Average-pools `factor`×`factor` blocks into single pixels.
    pub fn downsample(&self, factor: usize) -> Result<Canvas> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "downsample factor {factor} does not divide {}×{}",
                self.width, self.height
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (ow, oh) = (self.width / factor, self.height / factor);
        let inv_area = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; ow * oh];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * self.width + ox * factor;
                    for dx in 0..factor {
                        acc += self.pixels[row + dx];
                    }
                }
                out[oy * ow + ox] = acc * inv_area;
            }
        }
        Ok(Canvas {
            width: ow,
            height: oh,
            supersample: (self.supersample / factor).max(1),
            pixels: out,
        })
    }

    /// Samples the canvas at continuous pixel coordinates with bilinear
    /// weights; outside the image reads as background (0).
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        // Shift so integer coordinates land on pixel centers.
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let xi = x0 as i64 + dx;
                let yi = y0 as i64 + dy;
                if xi >= 0 && yi >= 0 && (xi as usize) < self.width && (yi as usize) < self.height
                {
                    acc += wy * wx * self.get(xi as usize, yi as usize);
                }
            }
        }
        acc
    }
}

/// Square world-space window rendered onto a canvas.
///
/// The full normalized view is centered at (0.5, 0.5) with half-extent 0.5;
/// zoom factor relative to it is `0.5 / half_extent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewWindow {
    pub center: Vec2,
    pub half_extent: f64,
}

impl ViewWindow {
    pub const FULL: ViewWindow = ViewWindow {
        center: [0.5, 0.5],
        half_extent: 0.5,
    };

    /// The window obtained by zooming the full view by `factor` around
    /// `center`.
    pub fn zoomed(center: Vec2, factor: f64) -> ViewWindow {
        assert!(factor > 0.0);
        ViewWindow {
            center,
            half_extent: 0.5 / factor,
        }
    }

    pub fn zoom_factor(&self) -> f64 {
        0.5 / self.half_extent
    }

    /// World units covered by one pixel on a square canvas of side `side`.
    pub fn pixel_size(&self, side: usize) -> f64 {
        2.0 * self.half_extent / side as f64
    }

    /// Maps a world point to continuous pixel coordinates on a square
    /// canvas of side `side`. Pixel (i, j) is centered at (j+0.5, i+0.5);
    /// world y-up becomes row-down.
    #[inline]
    pub fn world_to_pixel(&self, p: Vec2, side: usize) -> [f64; 2] {
        let scale = side as f64 / (2.0 * self.half_extent);
        [
            (p[0] - (self.center[0] - self.half_extent)) * scale,
            ((self.center[1] + self.half_extent) - p[1]) * scale,
        ]
    }

    /// Inverse of [`world_to_pixel`](ViewWindow::world_to_pixel).
    pub fn pixel_to_world(&self, px: [f64; 2], side: usize) -> Vec2 {
        let scale = 2.0 * self.half_extent / side as f64;
        [
            self.center[0] - self.half_extent + px[0] * scale,
            self.center[1] + self.half_extent - px[1] * scale,
        ]
    }
}

/// Reads a PNG into intensities in [0,1]. With `invert` (the default
/// convention), PNG black maps to 1.0 (foreground).
pub fn load_png(path: impl AsRef<Path>, invert: bool) -> Result<Canvas> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| {
            let v = p.0[0] as f64 / 65535.0;
            if invert {
                1.0 - v
            } else {
                v
            }
        })
        .collect();
    Canvas::from_pixels(w, h, pixels)
}

/// Writes a canvas as an 8-bit grayscale PNG. With `invert`, foreground
/// (1.0) becomes black.
pub fn save_png(path: impl AsRef<Path>, canvas: &Canvas, invert: bool) -> Result<()> {
    let bytes: Vec<u8> = canvas
        .pixels
        .iter()
        .map(|&v| {
            let v = v.clamp(0.0, 1.0);
            let v = if invert { 1.0 - v } else { v };
            (v * 255.0).round() as u8
        })
        .collect();
    let img = image::GrayImage::from_raw(canvas.width() as u32, canvas.height() as u32, bytes)
        .expect("buffer length matches dimensions");
    img.save(path)?;
    Ok(())
}
