//! 8-bit RGB image grid and single-pixel perturbation units.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ImageError {
    #[error("image dimensions must be nonzero, got {height}x{width}")]
    EmptyImage { height: usize, width: usize },
    #[error("data length {actual} does not match {height}x{width}x3 = {expected}")]
    LengthMismatch {
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("pixel ({x}, {y}) is outside a {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Color channel, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Red = 0,
    Green = 1,
    Blue = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Red, Channel::Green, Channel::Blue];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Row-major `height x width x 3` grid of 8-bit intensities.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyImage { height, width });
        }
        let expected = height * width * Self::CHANNELS;
        if data.len() != expected {
            return Err(ImageError::LengthMismatch {
                height,
                width,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Image filled with a single RGB value.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(height * width * Self::CHANNELS)
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height
    }

    pub(crate) fn check_bounds(&self, x: usize, y: usize) -> Result<(), ImageError> {
        if self.contains(x, y) {
            Ok(())
        } else {
            Err(ImageError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            })
        }
    }

    pub(crate) fn check_same_shape(&self, other: &ImageTensor) -> Result<(), ImageError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(ImageError::ShapeMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ))
        }
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * Self::CHANNELS
    }

    /// Channel value at column `x`, row `y`. Panics when out of bounds.
    #[inline]
    pub fn value(&self, x: usize, y: usize, channel: Channel) -> u8 {
        assert!(self.contains(x, y), "pixel ({x}, {y}) out of bounds");
        self.data[self.offset(x, y) + channel.index()]
    }

    /// Channel value with edge-replication for coordinates outside the grid.
    #[inline]
    pub(crate) fn value_clamped(&self, x: isize, y: isize, channel: Channel) -> u8 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[self.offset(cx, cy) + channel.index()]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        assert!(self.contains(x, y), "pixel ({x}, {y}) out of bounds");
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) -> Result<(), ImageError> {
        self.check_bounds(x, y)?;
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
        Ok(())
    }

    /// The 3x3 window around `(x, y)` in one channel, edge-replicated.
    pub(crate) fn window3(&self, x: usize, y: usize, channel: Channel) -> [u8; 9] {
        let mut out = [0u8; 9];
        let mut i = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                out[i] = self.value_clamped(x as isize + dx, y as isize + dy, channel);
                i += 1;
            }
        }
        out
    }

    /// Copy of `self` with `unit` written into it.
    pub fn with_unit(&self, unit: &PerturbationUnit) -> Result<ImageTensor, ImageError> {
        let mut out = self.clone();
        out.apply(unit)?;
        Ok(out)
    }

    pub fn apply(&mut self, unit: &PerturbationUnit) -> Result<(), ImageError> {
        self.set_pixel(unit.x, unit.y, unit.rgb())
    }

    /// Coordinates of pixels that differ from `other` in any channel, row-major.
    pub fn differing_pixels(&self, other: &ImageTensor) -> Result<Vec<(usize, usize)>, ImageError> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect())
    }
}

/// One candidate perturbation: replace pixel `(x, y)` with `(r, g, b)`.
///
/// `x` is the column and `y` the row, both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationUnit {
    pub x: usize,
    pub y: usize,
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl PerturbationUnit {
    pub fn new(x: usize, y: usize, rgb: [u8; 3]) -> Self {
        Self {
            x,
            y,
            r: rgb[0],
            g: rgb[1],
            b: rgb[2],
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub fn channel(&self, channel: Channel) -> u8 {
        self.rgb()[channel.index()]
    }

    /// True when writing this unit into `image` would not change it.
    pub fn is_noop_on(&self, image: &ImageTensor) -> bool {
        image.contains(self.x, self.y) && image.pixel(self.x, self.y) == self.rgb()
    }
}
