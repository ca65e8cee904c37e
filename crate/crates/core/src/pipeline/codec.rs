use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::tensor::LatentGrid;

/// Pixel image, `C×H×W` with values in `[-1, 1]`. Byte `b` maps to `b/127.5 − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid(Array3<f64>);

impl PixelGrid {
    pub fn new(values: Array3<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Array3::zeros((channels, height, width)))
    }

    pub fn from_bytes(channels: usize, height: usize, width: usize, interleaved: &[u8]) -> Result<Self> {
        if interleaved.len() != channels * height * width {
            return Err(Error::invalid("pixel buffer length does not match shape"));
        }
        Ok(Self(Array3::from_shape_fn((channels, height, width), |(c, y, x)| {
            interleaved[(y * width + x) * channels + c] as f64 / 127.5 - 1.0
        })))
    }

    /// Quantized, channel-interleaved bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.0.dim();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(quantize(self.0[(ch, y, x)]));
                }
            }
        }
        out
    }

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

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Toy stand-in for a VAE: `patch×patch` pixel blocks become latent cells, mixed across
/// channels by a seeded orthogonal matrix. Linear, and `decode` inverts `encode`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    patch: usize,
    pixel_channels: usize,
    mix: Array2<f64>,
}

pub const CODEC_PATCH: usize = 2;
pub const PIXEL_CHANNELS: usize = 3;

impl LatentCodec {
    pub fn new(seed: u64, pixel_channels: usize, patch: usize) -> Result<Self> {
        if pixel_channels == 0 || patch == 0 {
            return Err(Error::invalid("codec sizes must be positive"));
        }
        let n = pixel_channels * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0dec);
        let raw = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
        Ok(Self { patch, pixel_channels, mix: orthonormalize(raw) })
    }

    pub fn latent_channels(&self) -> usize {
        self.mix.nrows()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn mix(&self) -> &Array2<f64> {
        &self.mix
    }

    pub fn encode(&self, image: &PixelGrid) -> Result<LatentGrid> {
        let (c, h, w) = image.shape();
        if c != self.pixel_channels {
            return Err(Error::invalid(format!(
                "codec expects {} channels, image has {c}",
                self.pixel_channels
            )));
        }
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::invalid(format!("image {h}x{w} is not divisible by patch {}", self.patch)));
        }
        let (gh, gw) = (h / self.patch, w / self.patch);
        let blocks = patchify(&LatentGrid::from_array(image.0.clone()), self.patch)?;
        let cells = blocks.dot(&self.mix.t());
        let n = self.latent_channels();
        let mut out = LatentGrid::zeros(n, gh, gw);
        for (i, row) in cells.rows().into_iter().enumerate() {
            for (ch, v) in row.iter().enumerate() {
                out.array_mut()[(ch, i / gw, i % gw)] = *v;
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentGrid) -> Result<PixelGrid> {
        let (n, gh, gw) = z.shape();
        if n != self.latent_channels() {
            return Err(Error::invalid(format!(
                "codec expects {} latent channels, got {n}",
                self.latent_channels()
            )));
        }
        let mut cells = Array2::zeros((gh * gw, n));
        for ((ch, y, x), v) in z.array().indexed_iter() {
            cells[(y * gw + x, ch)] = *v;
        }
        let blocks = cells.dot(&self.mix);
        let grid = unpatchify(blocks.view(), self.pixel_channels, gh * self.patch, gw * self.patch, self.patch);
        Ok(PixelGrid(grid.into_array()))
    }
}

/// Modified Gram-Schmidt on the rows, run twice.
fn orthonormalize(mut m: Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    for _ in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = m.row(i).dot(&m.row(i)).sqrt();
            m.row_mut(i).mapv_inplace(|v| v / norm);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_is_orthogonal() {
        let c = LatentCodec::new(3, 3, 2).unwrap();
        let eye = c.mix().dot(&c.mix().t());
        for ((i, j), v) in eye.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-13);
        }
    }

    #[test]
    fn byte_roundtrip() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(3 * 4 * 6).collect();
        let img = PixelGrid::from_bytes(3, 4, 6, &bytes).unwrap();
        assert_eq!(img.to_bytes(), bytes);
        assert_eq!(quantize(5.0), 255);
        assert_eq!(quantize(-5.0), 0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = LatentCodec::new(0, 3, 2).unwrap();
        assert!(c.encode(&PixelGrid::zeros(3, 3, 4)).is_err());
        assert!(c.encode(&PixelGrid::zeros(1, 4, 4)).is_err());
        assert!(c.decode(&LatentGrid::zeros(4, 2, 2)).is_err());
    }
}
