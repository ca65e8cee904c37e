use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pipeline::codec::{PixelGrid, PIXEL_CHANNELS};
use crate::pipeline::compose::CompositionInputs;
use crate::tensor::Mask;

const PROMPTS: [&str; 4] = ["a photo of a dog", "a painting of a cat", "a small toy robot", "a red vase"];

/// Mask rectangles snap to this many pixels, so the latent-resolution mask covers
/// exactly the same pixels.
pub const MASK_ALIGN: usize = 4;

fn snap(v: f64) -> f64 {
    crate::pipeline::codec::quantize(v) as f64 / 127.5 - 1.0
}

/// Seeded toy inputs: a smooth background with soft blobs, a disk-shaped subject, an
/// aligned rectangular mask, and an initialization with a blurred copy of the subject
/// pasted into the mask. Every pixel is exactly representable as a byte.
pub fn synth_inputs(seed: u64, size: usize, subject_size: usize) -> Result<CompositionInputs> {
    if size < 2 * MASK_ALIGN || size % MASK_ALIGN != 0 {
        return Err(Error::invalid(format!("image size must be a multiple of {MASK_ALIGN}, at least {}", 2 * MASK_ALIGN)));
    }
    if subject_size < MASK_ALIGN || subject_size % MASK_ALIGN != 0 {
        return Err(Error::invalid(format!("subject size must be a positive multiple of {MASK_ALIGN}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = PIXEL_CHANNELS;

    let base: Vec<f64> = (0..c).map(|_| rng.random_range(-0.6..0.2)).collect();
    let tilt: Vec<(f64, f64)> = (0..c).map(|_| (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4))).collect();
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
        .map(|_| {
            let y = rng.random_range(0.0..size as f64);
            let x = rng.random_range(0.0..size as f64);
            let r = rng.random_range(0.1..0.3) * size as f64;
            (y, x, r, (0..c).map(|_| rng.random_range(-0.5..0.5)).collect())
        })
        .collect();
    let background = Array3::from_shape_fn((c, size, size), |(ch, y, x)| {
        let (fy, fx) = (y as f64 / size as f64 - 0.5, x as f64 / size as f64 - 0.5);
        let mut v = base[ch] + tilt[ch].0 * fy + tilt[ch].1 * fx;
        for (by, bx, r, col) in &blobs {
            let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
            v += col[ch] * (-d2 / (2.0 * r * r)).exp();
        }
        snap(v.clamp(-1.0, 1.0))
    });

    let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..0.9)).collect();
    let backdrop: Vec<f64> = (0..c).map(|_| rng.random_range(-0.9..-0.5)).collect();
    let s = subject_size as f64;
    let subject = Array3::from_shape_fn((c, subject_size, subject_size), |(ch, y, x)| {
        let (dy, dx) = (y as f64 + 0.5 - s / 2.0, x as f64 + 0.5 - s / 2.0);
        let inside = dy * dy + dx * dx <= (0.38 * s).powi(2);
        snap(if inside { color[ch] - 0.3 * dy / s } else { backdrop[ch] })
    });

    let cells = size / MASK_ALIGN;
    let mh = rng.random_range((cells / 4).max(1)..=(cells / 2).max(1));
    let mw = rng.random_range((cells / 4).max(1)..=(cells / 2).max(1));
    let y0 = rng.random_range(0..=cells - mh) * MASK_ALIGN;
    let x0 = rng.random_range(0..=cells - mw) * MASK_ALIGN;
    let (y1, x1) = (y0 + mh * MASK_ALIGN, x0 + mw * MASK_ALIGN);
    let mask = Mask::new(ndarray::Array2::from_shape_fn((size, size), |(y, x)| {
        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
            1.0
        } else {
            0.0
        }
    }))?;

    // nearest-neighbour resize of the subject into the box, then a 3×3 box blur
    let (bh, bw) = (y1 - y0, x1 - x0);
    let pasted = Array3::from_shape_fn((c, bh, bw), |(ch, y, x)| {
        subject[(ch, y * subject_size / bh, x * subject_size / bw)]
    });
    let mut init = background.clone();
    for ch in 0..c {
        for y in 0..bh {
            for x in 0..bw {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(bh) {
                    for xx in x.saturating_sub(1)..(x + 2).min(bw) {
                        acc += pasted[(ch, yy, xx)];
                        n += 1.0;
                    }
                }
                init[(ch, y0 + y, x0 + x)] = snap(acc / n);
            }
        }
    }

    Ok(CompositionInputs {
        background: PixelGrid::new(background),
        init: PixelGrid::new(init),
        subject: PixelGrid::new(subject),
        mask,
        prompt: PROMPTS[(seed % PROMPTS.len() as u64) as usize].to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip_exactly() {
        let a = synth_inputs(5, 32, 16).unwrap();
        for img in [&a.background, &a.init, &a.subject] {
            let (c, h, w) = img.shape();
            assert_eq!(&PixelGrid::from_bytes(c, h, w, &img.to_bytes()).unwrap(), img);
        }
        assert!(a.mask.coverage() > 0.0 && a.mask.coverage() < 1.0);
        assert!(a.validate().is_ok());
    }

    #[test]
    fn mask_is_aligned() {
        for seed in 0..20 {
            let a = synth_inputs(seed, 32, 16).unwrap();
            let m = a.mask.values();
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(m[(y, x)], m[(y / MASK_ALIGN * MASK_ALIGN, x / MASK_ALIGN * MASK_ALIGN)]);
                }
            }
        }
    }

    #[test]
    fn init_differs_only_inside_mask() {
        let a = synth_inputs(2, 32, 16).unwrap();
        for ((ch, y, x), v) in a.init.values().indexed_iter() {
            if a.mask.get(y, x) == 0.0 {
                assert_eq!(*v, a.background.values()[(ch, y, x)]);
            }
        }
    }
}
