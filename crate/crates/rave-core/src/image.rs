//! Dense RGB pixel buffers in linear [0, 1] space.
//!
//! The same container carries rendered images, optimization targets, and
//! per-pixel loss gradients (which are unbounded), so the [0, 1] range is a
//! convention of producers like the renderer rather than a type invariant.

use crate::error::{invalid, Error, Result};

/// Row-major RGB image with `f64` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ImageBuffer {
    /// Creates a buffer filled with a constant color.
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid!("image dimensions must be positive, got {width}x{height}"));
        }
        Ok(Self { width, height, pixels: vec![color; width * height] })
    }

    /// Creates a zero (black) buffer.
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, [0.0; 3])
    }

    /// Builds a buffer by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut img = Self::zeros(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = f(x, y);
            }
        }
        Ok(img)
    }

    /// Wraps an existing pixel vector; `pixels.len()` must equal `width * height`.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid!("image dimensions must be positive, got {width}x{height}"));
        }
        if pixels.len() != width * height {
            return Err(invalid!(
                "pixel count {} does not match {width}x{height}",
                pixels.len()
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.pixels[y * self.width + x] = value;
    }

    /// All pixels in row-major order.
    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.pixels
    }

    /// One image row.
    pub fn row(&self, y: usize) -> &[[f64; 3]] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Errors unless `other` has identical dimensions.
    pub fn check_same_dims(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(invalid!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ));
        }
        Ok(())
    }

    /// True when every channel of every pixel is finite.
    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }
}

/// Extracts a single channel as a flat row-major vector.
pub(crate) fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.pixels().iter().map(|p| p[c]).collect()
}

/// Validation helper shared by loss functions.
pub(crate) fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), Error> {
    a.check_same_dims(b)
}
