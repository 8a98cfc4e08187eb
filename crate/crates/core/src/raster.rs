//! 8-bit rasters: RGB images and single-channel label masks.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, interleaved RGB.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `size×size` window at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<RgbImage> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::dim(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = RgbImage::new(h, w);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }
}

/// Single-channel label raster. Binary masks hold {0,1}; merged label
/// masks hold small class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Value at a signed coordinate, 0 outside the raster.
    #[inline]
    pub fn get_or_zero(&self, y: isize, x: isize) -> u8 {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            0
        } else {
            self.get(y as usize, x as usize)
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn count_eq(&self, v: u8) -> usize {
        self.data.iter().filter(|&&d| d == v).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn same_extent(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Binary mask of pixels equal to `class`.
    pub fn class_mask(&self, class: u8) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v == class) as u8).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| (a != 0 || b != 0) as u8)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| (a != 0 && b != 0) as u8)
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask> {
        if !self.same_extent(other) {
            return Err(Error::dim(format!(
                "mask extents differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Every nonzero pixel of `self` is nonzero in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_extent(other)
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x) != 0)
    }

    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }
}
