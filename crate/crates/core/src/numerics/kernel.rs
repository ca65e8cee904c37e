use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Boundary handling for blurs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Out-of-range samples read as zero.
    Zero,
    /// Out-of-range samples read the nearest edge value.
    #[default]
    Replicate,
}

impl std::str::FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Padding::Zero),
            "replicate" => Ok(Padding::Replicate),
            other => Err(Error::invalid(format!("unknown padding `{other}`"))),
        }
    }
}

/// Odd-length, symmetric, non-negative taps summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    weights: Vec<f64>,
}

impl Kernel1D {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel length must be odd and positive, got {}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("kernel weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("kernel weights sum to {sum}, expected 1")));
        }
        let n = weights.len();
        if (0..n / 2).any(|i| (weights[i] - weights[n - 1 - i]).abs() > SUM_TOL) {
            return Err(Error::invalid("kernel must be symmetric about its center"));
        }
        Ok(Self { weights })
    }

    /// The single-tap kernel `[1.0]`.
    pub fn identity() -> Self {
        Self { weights: vec![1.0] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn radius(&self) -> usize {
        self.weights.len() / 2
    }
}

/// Normalized discrete Gaussian sampled at integer offsets `-(size/2)..=size/2`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Result<Kernel1D> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd and positive, got {size}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive and finite, got {sigma}")));
    }
    let r = (size / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|o| (-((o * o) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Kernel1D::new(raw.into_iter().map(|w| w / total).collect())
}

/// Gaussian with the conventional `2·⌈3σ⌉+1` support, truncated to at most `max_len` taps.
pub fn gaussian_kernel_for_sigma(sigma: f64, max_len: usize) -> Result<Kernel1D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive and finite, got {sigma}")));
    }
    let wanted = 2 * (3.0 * sigma).ceil().min(1e6) as usize + 1;
    let cap = if max_len % 2 == 0 { max_len.saturating_sub(1) } else { max_len }.max(1);
    gaussian_kernel_1d(wanted.min(cap), sigma)
}

/// Separable `K×K` kernel, the outer product of a [`Kernel1D`] with itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    weights: Array2<f64>,
}

impl Kernel2D {
    pub fn separable(kernel: &Kernel1D) -> Self {
        let w = kernel.weights();
        let n = w.len();
        Self { weights: Array2::from_shape_fn((n, n), |(i, j)| w[i] * w[j]) }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn size(&self) -> usize {
        self.weights.nrows()
    }
}

#[inline]
fn sample(len: usize, idx: i64, padding: Padding) -> Option<usize> {
    if (0..len as i64).contains(&idx) {
        return Some(idx as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Replicate => Some(idx.clamp(0, len as i64 - 1) as usize),
    }
}

/// Same-size 2D correlation of `input` with `kernel` (identical to convolution for the
/// symmetric kernels this type admits).
pub fn convolve2d(input: ArrayView2<f64>, kernel: &Kernel2D, padding: Padding) -> Result<Array2<f64>> {
    let (h, w) = input.dim();
    let k = kernel.size();
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot convolve an empty grid"));
    }
    if k > 2 * h.min(w) + 1 {
        return Err(Error::invalid(format!("kernel of size {k} does not fit a {h}x{w} grid")));
    }
    let r = (k / 2) as i64;
    let kw = kernel.weights();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                let Some(sy) = sample(h, y as i64 + i as i64 - r, padding) else { continue };
                for j in 0..k {
                    if let Some(sx) = sample(w, x as i64 + j as i64 - r, padding) {
                        acc += kw[(i, j)] * input[(sy, sx)];
                    }
                }
            }
            out[(y, x)] = acc;
        }
    }
    Ok(out)
}

/// `n×n` matrix `B` with `B·x` equal to the 1D blur of `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzBlur {
    matrix: Array2<f64>,
}

impl ToeplitzBlur {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    /// Blurs every column of `x` along its row axis.
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.nrows() != self.len() {
            return Err(Error::invalid(format!(
                "blur of length {} applied to {} rows",
                self.len(),
                x.nrows()
            )));
        }
        Ok(self.matrix.dot(&x))
    }
}

pub fn toeplitz_from_kernel(kernel: &Kernel1D, n: usize, padding: Padding) -> Result<ToeplitzBlur> {
    if n == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    if kernel.len() > 2 * n - 1 {
        return Err(Error::invalid(format!(
            "kernel of length {} exceeds 2n-1 = {}",
            kernel.len(),
            2 * n - 1
        )));
    }
    let r = kernel.radius() as i64;
    let mut matrix = Array2::zeros((n, n));
    for i in 0..n {
        for (o, w) in kernel.weights().iter().enumerate() {
            if let Some(j) = sample(n, i as i64 + o as i64 - r, padding) {
                matrix[(i, j)] += w;
            }
        }
    }
    Ok(ToeplitzBlur { matrix })
}

fn check_qk(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<()> {
    if q.dim() != k.dim() {
        return Err(Error::invalid(format!("Q {:?} and K {:?} differ in shape", q.dim(), k.dim())));
    }
    Ok(())
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `‖B(QKᵀ) − (BQ)Kᵀ‖∞`: blurring the attention weights along the query axis versus
/// blurring the queries. Zero up to rounding.
pub fn attn_blur_equivalence_residual(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    kernel: &Kernel1D,
    padding: Padding,
) -> Result<f64> {
    check_qk(q, k)?;
    let b = toeplitz_from_kernel(kernel, q.nrows(), padding)?;
    let blurred_weights = b.matrix().dot(&q.dot(&k.t()));
    let blurred_queries = b.apply(q)?.dot(&k.t());
    Ok(max_abs_diff(&blurred_weights, &blurred_queries))
}

/// `‖B(QKᵀ) − Q(BK)ᵀ‖∞`: the same comparison with the keys blurred instead.
pub fn key_blur_residual(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    kernel: &Kernel1D,
    padding: Padding,
) -> Result<f64> {
    check_qk(q, k)?;
    let b = toeplitz_from_kernel(kernel, q.nrows(), padding)?;
    let blurred_weights = b.matrix().dot(&q.dot(&k.t()));
    let blurred_keys = q.dot(&b.apply(k)?.t());
    Ok(max_abs_diff(&blurred_weights, &blurred_keys))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise, max-shifted softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        if let Some(slice) = row.as_slice_mut() {
            softmax_in_place(slice);
        } else {
            let mut tmp = row.to_vec();
            softmax_in_place(&mut tmp);
            row.iter_mut().zip(tmp).for_each(|(d, s)| *d = s);
        }
    }
    Ok(out)
}
