//! Dense `H x W x C` feature grids.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::{Float, FromPrimitive};

use crate::binio;
use crate::error::{Error, Result};
use crate::geometry::PixelCoord;

/// Scalar type of a feature plane: `f32` for storage, `f64` for training and
/// gradient checks.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major grid with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePlane<T = f64> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

pub const FPLN_MAGIC: &[u8; 4] = b"FPLN";

impl<T: Real> FeaturePlane<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeaturePlane {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x{channels} plane",
                data.len()
            )));
        }
        Ok(FeaturePlane {
            height,
            width,
            channels,
            data,
        })
    }

    /// Plane whose value at `(row, col, ch)` is `f(row, col, ch)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        FeaturePlane {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, px: PixelCoord) -> &[T] {
        self.at(px.row, px.col)
    }

    pub fn pixel_mut(&mut self, px: PixelCoord) -> &mut [T] {
        let start = (px.row * self.width + px.col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn at(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn ensure_shape(&self, other: &FeaturePlane<T>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FeaturePlane<U> {
        FeaturePlane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Elementwise sum of two planes of equal shape.
    pub fn add(&self, other: &FeaturePlane<T>) -> Result<FeaturePlane<T>> {
        self.ensure_shape(other, "plane addition")?;
        Ok(FeaturePlane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &FeaturePlane<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, FPLN_MAGIC, 1)?;
        binio::write_len(w, self.height)?;
        binio::write_len(w, self.width)?;
        binio::write_len(w, self.channels)?;
        binio::write_f32s(w, self.data.iter().map(|v| v.as_f64()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

impl FeaturePlane<f32> {
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, FPLN_MAGIC, 1)?;
        let h = binio::read_len(r)?;
        let w = binio::read_len(r)?;
        let c = binio::read_len(r)?;
        let data = binio::read_f32s(r, h * w * c)?;
        binio::expect_eof(r)?;
        FeaturePlane::from_vec(h, w, c, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        FeaturePlane::read(&mut f)
    }
}
