//! Plain row-major rasters for color and depth input.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<[u8; 3]>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: [u8; 3]) -> Result<Self> {
        RgbImage::new(height, width, vec![color; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: [u8; 3]) {
        self.data[row * self.width + col] = color;
    }
}

/// Raw depth samples; `0` marks a missing measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        Ok(DepthImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn samples(&self) -> &[u16] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }
}

pub(crate) fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive, got {height}x{width}"
        )));
    }
    if height.checked_mul(width) != Some(len) {
        return Err(Error::mismatch(format!(
            "{height}x{width} image needs {} pixels, got {len}",
            height.saturating_mul(width)
        )));
    }
    Ok(())
}
