//! File formats: binary portable any-maps (P5/P6, maxval 255) for images and masks,
//! and the `LAT` latent dump.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::pipeline::PixelGrid;
use crate::tensor::{LatentGrid, Mask};

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Splits a P5/P6 header into (magic, width, height, maxval) and the raster offset.
fn parse_pnm_header(path: &Path, bytes: &[u8]) -> Result<(String, usize, usize, usize, usize)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(format_err(path, "missing raster"));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad {what} `{s}`")));
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    Ok((fields[0].clone(), width, height, maxval, i + 1))
}

fn read_pnm_raw(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, width, height, maxval, offset) = parse_pnm_header(path, &bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(path, format!("unsupported magic `{other}`, expected P5 or P6"))),
    };
    if maxval != 255 {
        return Err(format_err(path, format!("maxval {maxval} unsupported, expected 255")));
    }
    let need = width * height * channels;
    let raster = &bytes[offset..];
    if raster.len() < need {
        return Err(format_err(path, format!("raster has {} bytes, expected {need}", raster.len())));
    }
    Ok((channels, height, width, raster[..need].to_vec()))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<PixelGrid> {
    let path = path.as_ref();
    let (c, h, w, raster) = read_pnm_raw(path)?;
    PixelGrid::from_bytes(c, h, w, &raster)
}

fn write_pnm(path: &Path, channels: usize, height: usize, width: usize, raster: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid(format!("cannot write a {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes P6 for three channels, P5 for one.
pub fn write_image(path: impl AsRef<Path>, image: &PixelGrid) -> Result<()> {
    let (c, h, w) = image.shape();
    write_pnm(path.as_ref(), c, h, w, &image.to_bytes())
}

/// Reads a P5 graymap as a mask in `[0,1]`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (c, h, w, raster) = read_pnm_raw(path)?;
    if c != 1 {
        return Err(format_err(path, "mask must be a P5 graymap"));
    }
    Mask::new(Array2::from_shape_fn((h, w), |(y, x)| raster[y * w + x] as f64 / 255.0))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let (h, w) = mask.shape();
    let raster: Vec<u8> = mask.values().iter().map(|v| (v * 255.0).round() as u8).collect();
    write_pnm(path.as_ref(), 1, h, w, &raster)
}

/// `LAT <C> <H> <W>\n` followed by little-endian f32 values, channel-then-row-major.
pub fn encode_latent(z: &LatentGrid) -> Vec<u8> {
    let (c, h, w) = z.shape();
    let mut out = format!("LAT {c} {h} {w}\n").into_bytes();
    for v in z.array().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_latent(path: &Path, bytes: &[u8]) -> Result<LatentGrid> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| format_err(path, "missing LAT header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err(path, "header is not ASCII"))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 4 || parts[0] != "LAT" {
        return Err(format_err(path, format!("bad header `{header}`")));
    }
    let dims: Vec<usize> = parts[1..]
        .iter()
        .map(|p| p.parse().map_err(|_| format_err(path, format!("bad dimension `{p}`"))))
        .collect::<Result<_>>()?;
    let body = &bytes[nl + 1..];
    let n = dims[0] * dims[1] * dims[2];
    if body.len() != 4 * n {
        return Err(format_err(path, format!("body has {} bytes, expected {}", body.len(), 4 * n)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    LatentGrid::from_vec(dims[0], dims[1], dims[2], data)
}

pub fn write_latent(path: impl AsRef<Path>, z: &LatentGrid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_latent(z)).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latent(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_header_is_exact() {
        let z = LatentGrid::from_vec(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_latent(&z);
        let mut want = b"LAT 1 1 2\n".to_vec();
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_latent(Path::new("x"), &bytes).unwrap(), z);
    }

    #[test]
    fn latent_rejects_garbage() {
        let p = Path::new("x");
        assert!(decode_latent(p, b"LAT 1 1\n").is_err());
        assert!(decode_latent(p, b"LAT 1 1 1\n\0\0").is_err());
        assert!(decode_latent(p, b"NOPE 1 1 1\n\0\0\0\0").is_err());
    }

    #[test]
    fn pnm_header_with_comments() {
        let mut bytes = b"P5\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let p = Path::new("m.pgm");
        let (magic, w, h, maxval, off) = parse_pnm_header(p, &bytes).unwrap();
        assert_eq!((magic.as_str(), w, h, maxval), ("P5", 2, 1, 255));
        assert_eq!(&bytes[off..], &[0, 255]);
    }
}
