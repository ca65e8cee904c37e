use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::Mask;

/// `H×W` mask whose cells are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(Array2<bool>);

impl BinaryMask {
    pub fn new(cells: Array2<bool>) -> Self {
        Self(cells)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self(Array2::from_elem((height, width), false))
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self(Array2::from_elem((height, width), true))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut((usize, usize)) -> bool) -> Self {
        Self(Array2::from_shape_fn((height, width), f))
    }

    /// Axis-aligned rectangle `[y0, y1) × [x0, x1)`, clipped to the grid.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self::from_fn(height, width, |(y, x)| y >= y0 && y < y1 && x >= x0 && x < x1)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0[(y, x)]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.0[(y, x)] = on;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|c| **c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Cell-wise subset test.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.0.iter().zip(other.0.iter()).all(|(a, b)| !a || *b)
    }

    pub fn to_mask(&self) -> Mask {
        Mask::new(self.0.mapv(|c| if c { 1.0 } else { 0.0 })).expect("0/1 values are in range")
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> BinaryMask {
        let (h, w) = self.shape();
        Self::from_fn(h * factor, w * factor, |(y, x)| self.0[(y / factor, x / factor)])
    }

    /// Area-majority downsampling: a coarse cell is on when at least half of the
    /// `factor×factor` block it covers is set.
    pub fn downsample_majority(mask: &Mask, factor: usize) -> Result<BinaryMask> {
        let (h, w) = mask.shape();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!(
                "mask {h}x{w} is not divisible by factor {factor}"
            )));
        }
        let area = (factor * factor) as f64;
        Ok(Self::from_fn(h / factor, w / factor, |(y, x)| {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += mask.get(y * factor + dy, x * factor + dx);
                }
            }
            s / area >= 0.5
        }))
    }
}

/// Pixel adjacency used when labeling components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(i64, i64)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// `cell = 1` iff `map ≥ gamma`. Map values are clamped to `[0,1]` before the compare.
pub fn binarize(map: ArrayView2<f64>, gamma: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("threshold {gamma} outside [0,1]")));
    }
    Ok(BinaryMask(map.mapv(|v| v.clamp(0.0, 1.0) >= gamma)))
}

/// Dilation by a `kernel_size × kernel_size` square.
pub fn dilate(mask: &BinaryMask, kernel_size: usize) -> Result<BinaryMask> {
    if kernel_size == 0 || kernel_size % 2 == 0 {
        return Err(Error::invalid(format!(
            "dilation kernel must be odd and positive, got {kernel_size}"
        )));
    }
    let r = (kernel_size / 2) as i64;
    let (h, w) = mask.shape();
    Ok(BinaryMask::from_fn(h, w, |(y, x)| {
        let (y, x) = (y as i64, x as i64);
        let ys = (y - r).max(0)..=(y + r).min(h as i64 - 1);
        ys.into_iter().any(|sy| {
            ((x - r).max(0)..=(x + r).min(w as i64 - 1)).any(|sx| mask.0[(sy as usize, sx as usize)])
        })
    }))
}

/// Keeps only the largest connected component. Ties go to the component reached
/// first in row-major scan order.
pub fn max_connected_component(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let (h, w) = mask.shape();
    let mut label = Array2::<usize>::zeros((h, w));
    let mut best: Option<(usize, usize)> = None; // (label, size)
    let mut next = 0;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.0[(y, x)] || label[(y, x)] != 0 {
                continue;
            }
            next += 1;
            label[(y, x)] = next;
            queue.push_back((y, x));
            let mut size = 0;
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for (dy, dx) in connectivity.offsets() {
                    let (ny, nx) = (cy as i64 + dy, cx as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask.0[(ny, nx)] && label[(ny, nx)] == 0 {
                        label[(ny, nx)] = next;
                        queue.push_back((ny, nx));
                    }
                }
            }
            if best.is_none_or(|(_, s)| size > s) {
                best = Some((next, size));
            }
        }
    }
    match best {
        Some((keep, _)) => BinaryMask(label.mapv(|l| l == keep)),
        None => BinaryMask::empty(h, w),
    }
}

/// `|a∩b| / |a∪b|`, with two empty masks scoring 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "iou of masks with shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.0.iter().zip(b.0.iter()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn from_rows(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |(y, x)| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn binarize_threshold() {
        let m = binarize(array![[0.1, 0.3]].view(), 0.2).unwrap();
        assert_eq!(m.cells(), &array![[false, true]]);
        let all = binarize(array![[0.0, 0.3], [-0.5, 1.0]].view(), 0.0).unwrap();
        assert_eq!(all.count(), 4);
        assert!(binarize(array![[0.5]].view(), 1.5).is_err());
        // clamped above 1 still compares as 1
        assert!(binarize(array![[3.0]].view(), 1.0).unwrap().get(0, 0));
    }

    #[test]
    fn dilate_center_pixel() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let d = dilate(&m, 3).unwrap();
        assert_eq!(d, BinaryMask::rect(5, 5, 1, 1, 4, 4));
        assert_eq!(dilate(&m, 1).unwrap(), m);
        assert!(dilate(&m, 2).is_err());
        assert!(dilate(&m, 0).is_err());
    }

    #[test]
    fn largest_component_kept() {
        let m = from_rows(&[
            "##...", //
            "##..#",
            "#...#",
            "....#",
        ]);
        let want = from_rows(&[
            "##...", //
            "##...",
            "#....",
            ".....",
        ]);
        assert_eq!(max_connected_component(&m, Connectivity::Four), want);
    }

    #[test]
    fn component_ties_go_to_scan_order() {
        let m = from_rows(&["#.#"]);
        assert_eq!(max_connected_component(&m, Connectivity::Four), from_rows(&["#.."]));
    }

    #[test]
    fn diagonal_connectivity_matters() {
        let m = from_rows(&["#..", ".#.", "..#", "##."]);
        assert_eq!(max_connected_component(&m, Connectivity::Eight).count(), 5);
        assert_eq!(max_connected_component(&m, Connectivity::Four).count(), 2);
    }

    #[test]
    fn component_of_empty_and_single() {
        let e = BinaryMask::empty(3, 4);
        assert_eq!(max_connected_component(&e, Connectivity::Eight), e);
        let s = BinaryMask::rect(4, 4, 1, 1, 3, 3);
        assert_eq!(max_connected_component(&s, Connectivity::Four), s);
    }

    #[test]
    fn iou_cases() {
        let a = BinaryMask::rect(3, 3, 0, 0, 2, 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BinaryMask::rect(3, 3, 2, 2, 3, 3);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let e = BinaryMask::empty(3, 3);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        // 2x2 block against the same block shifted right by one on a 2x3 grid
        let l = BinaryMask::rect(2, 3, 0, 0, 2, 2);
        let r = BinaryMask::rect(2, 3, 0, 1, 2, 3);
        assert_eq!(iou(&l, &r).unwrap(), 2.0 / 6.0);
        assert!(iou(&l, &BinaryMask::empty(3, 2)).is_err());
    }

    #[test]
    fn majority_downsample() {
        let mut m = Mask::zeros(4, 4);
        m.set(0, 0, 1.0).unwrap();
        m.set(0, 1, 1.0).unwrap();
        m.set(2, 2, 1.0).unwrap();
        let d = BinaryMask::downsample_majority(&m, 2).unwrap();
        assert_eq!(d.cells(), &array![[true, false], [false, false]]);
        assert!(BinaryMask::downsample_majority(&m, 3).is_err());
    }
}
