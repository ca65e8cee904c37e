//! Dense value types shared across the crate: latent grids and soft masks.

use ndarray::{Array2, Array3, Zip};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A `C×H×W` real-valued latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid(Array3<f64>);

impl LatentGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Array3::zeros((channels, height, width)))
    }

    pub fn full(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self(Array3::from_elem((channels, height, width), value))
    }

    pub fn from_array(array: Array3<f64>) -> Self {
        Self(array)
    }

    /// Builds a grid from values laid out channel-major, then row-major.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Array3::from_shape_vec((channels, height, width), data)
            .map(Self)
            .map_err(|e| Error::invalid(format!("latent shape {channels}x{height}x{width}: {e}")))
    }

    /// `(channels, height, width)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn array(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn array_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_array(self) -> Array3<f64> {
        self.0
    }

    /// Values in channel-then-row-major order.
    pub fn values(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.ensure_same_shape(other, "sub")?;
        Ok(Self(&self.0 - &other.0))
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.ensure_same_shape(other, "add")?;
        Ok(Self(&self.0 + &other.0))
    }

    pub fn scale(&self, factor: f64) -> LatentGrid {
        Self(self.0.mapv(|v| v * factor))
    }

    pub fn dot(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(Zip::from(&self.0).and(&other.0).fold(0.0, |acc, a, b| acc + a * b))
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(Zip::from(&self.0)
            .and(&other.0)
            .fold(0.0f64, |m, a, b| m.max((a - b).abs())))
    }

    /// True when every element has the same bit pattern.
    pub fn bitwise_eq(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
            && self.0.iter().zip(other.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// SHA-256 over the little-endian f64 bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let (c, h, w) = self.shape();
        for d in [c, h, w] {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in self.0.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// An `H×W` soft mask with values in `[0,1]`; broadcast across latent channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Array2<f64>);

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0,1]")));
        }
        Ok(Self(values))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self(Array2::ones((height, width)))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    /// `(height, width)`
    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0[(y, x)]
    }

    pub fn set(&mut self, y: usize, x: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("mask value {value} outside [0,1]")));
        }
        self.0[(y, x)] = value;
        Ok(())
    }

    /// Fraction of total mask mass.
    pub fn coverage(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.sum() / self.0.len() as f64
    }

    pub(crate) fn ensure_matches(&self, grid: &LatentGrid, what: &str) -> Result<()> {
        if self.shape() != (grid.height(), grid.width()) {
            return Err(Error::invalid(format!(
                "{what}: mask {:?} does not match latent {}x{}",
                self.shape(),
                grid.height(),
                grid.width()
            )));
        }
        Ok(())
    }
}
