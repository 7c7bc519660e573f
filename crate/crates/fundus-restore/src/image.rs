//! In-memory rasters: float images in HWC layout and binary masks.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::rng::Pcg32;

/// Row-major HWC float image. Values are nominally in `[0, 1]` but the
/// container itself does not clamp; samplers and the blender decide when
/// to clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Validation(format!(
                "image buffer holds {} floats, expected {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                height * width * channels
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Rec. 601 luma, one value per pixel. Single-channel images pass
    /// through unchanged.
    pub fn luminance(&self) -> Result<Vec<f32>> {
        match self.channels {
            1 => Ok(self.data.clone()),
            3 => Ok(self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect()),
            c => Err(Error::Validation(format!(
                "luminance needs 1 or 3 channels, got {c}"
            ))),
        }
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Image of i.i.d. standard-normal draws, consumed in row-major
    /// HWC order so the same RNG state always yields the same field.
    pub fn gaussian(height: usize, width: usize, channels: usize, rng: &mut Pcg32) -> Self {
        let mut img = Image::zeros(height, width, channels);
        for v in &mut img.data {
            *v = rng.next_gaussian() as f32;
        }
        img
    }

    /// Copy into CHW layout for the network.
    pub fn to_chw(&self) -> Array3<f32> {
        let mut out = Array3::zeros((self.channels, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[[c, y, x]] = self.get(y, x, c);
                }
            }
        }
        out
    }

    pub fn from_chw(arr: &Array3<f32>) -> Self {
        let (channels, height, width) = arr.dim();
        let mut img = Image::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(y, x, c, arr[[c, y, x]]);
                }
            }
        }
        img
    }
}

/// Binary mask, one byte per pixel, values restricted to {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Validation(format!(
                "mask buffer holds {} bytes, expected {}x{} = {}",
                data.len(),
                height,
                width,
                height * width
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[self.idx(y, x)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        let i = self.idx(y, x);
        self.data[i] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Complement (1 - m).
    pub fn invert(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        debug_assert!(self.same_shape(other));
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a & b)
                .collect(),
        }
    }
}

/// Integer offsets of a filled disc of the given radius, centered at the
/// origin: all `(dy, dx)` with `dy^2 + dx^2 <= r^2`. Shared by morphology
/// kernels and the top-hat vessel detector.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}
