use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::numerics::{convolve2d, gaussian_kernel_for_sigma, toeplitz_from_kernel, Kernel2D, Padding};

/// One of the six projection groups of joint attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlurTarget {
    QTxt,
    KTxt,
    VTxt,
    QImg,
    KImg,
    VImg,
}

impl BlurTarget {
    pub const ALL: [BlurTarget; 6] = [
        BlurTarget::QTxt,
        BlurTarget::KTxt,
        BlurTarget::VTxt,
        BlurTarget::QImg,
        BlurTarget::KImg,
        BlurTarget::VImg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlurTarget::QTxt => "Q_txt",
            BlurTarget::KTxt => "K_txt",
            BlurTarget::VTxt => "V_txt",
            BlurTarget::QImg => "Q_img",
            BlurTarget::KImg => "K_img",
            BlurTarget::VImg => "V_img",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, BlurTarget::QImg | BlurTarget::KImg | BlurTarget::VImg)
    }
}

impl serde::Serialize for BlurTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl std::fmt::Display for BlurTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis along which a token group is blurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlurAxis {
    /// Along the flattened token axis; the Toeplitz form acts on rows.
    #[default]
    Token1d,
    /// Over the unflattened image-token grid. Text tokens have no grid and fall back
    /// to `Token1d`.
    Spatial2d,
}

impl std::str::FromStr for BlurAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-1d" => Ok(BlurAxis::Token1d),
            "spatial-2d" => Ok(BlurAxis::Spatial2d),
            other => Err(Error::invalid(format!("unknown blur axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurSpec {
    pub target: BlurTarget,
    pub sigma: f64,
    pub axis: BlurAxis,
    pub padding: Padding,
}

impl BlurSpec {
    pub fn new(target: BlurTarget, sigma: f64) -> Self {
        Self { target, sigma, axis: BlurAxis::default(), padding: Padding::default() }
    }

    pub fn with_axis(mut self, axis: BlurAxis) -> Self {
        self.axis = axis;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }
}

/// What a backbone call should perturb and record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionPlan {
    pub blur: Option<BlurSpec>,
    pub capture_cross_attn: bool,
    pub capture_qkv: bool,
}

impl InterventionPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn capture() -> Self {
        Self { capture_cross_attn: true, ..Self::default() }
    }

    pub fn blur(spec: BlurSpec) -> Self {
        Self { blur: Some(spec), ..Self::default() }
    }

    pub fn with_cross_attn(mut self) -> Self {
        self.capture_cross_attn = true;
        self
    }

    pub fn with_qkv(mut self) -> Self {
        self.capture_qkv = true;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if let Some(b) = &self.blur {
            if !(b.sigma > 0.0) || !b.sigma.is_finite() {
                return Err(Error::invalid(format!("blur sigma must be positive, got {}", b.sigma)));
            }
        }
        Ok(())
    }
}

/// Gaussian blur of an `n×d` token group, independently per feature column.
///
/// `Token1d` blurs along the row axis (kernel support capped at `2n−1`). `Spatial2d`
/// reshapes rows onto `grid = (rows, cols)` and applies the separable 2D kernel.
pub fn blur_group(
    tokens: ArrayView2<f64>,
    sigma: f64,
    axis: BlurAxis,
    grid: Option<(usize, usize)>,
    padding: Padding,
) -> Result<Array2<f64>> {
    let n = tokens.nrows();
    if n == 0 {
        return Ok(tokens.to_owned());
    }
    match axis {
        BlurAxis::Token1d => {
            let kernel = gaussian_kernel_for_sigma(sigma, 2 * n - 1)?;
            toeplitz_from_kernel(&kernel, n, padding)?.apply(tokens)
        }
        BlurAxis::Spatial2d => {
            let (gh, gw) = grid.ok_or_else(|| Error::invalid("spatial blur needs a grid shape"))?;
            if gh * gw != n {
                return Err(Error::invalid(format!(
                    "grid {gh}x{gw} does not hold {n} tokens"
                )));
            }
            let kernel = Kernel2D::separable(&gaussian_kernel_for_sigma(sigma, 2 * gh.min(gw) + 1)?);
            let mut out = Array2::zeros(tokens.raw_dim());
            for (c, col) in tokens.columns().into_iter().enumerate() {
                let plane = col.to_owned().into_shape_with_order((gh, gw)).expect("n = gh*gw");
                let blurred = convolve2d(plane.view(), &kernel, padding)?;
                out.column_mut(c).iter_mut().zip(blurred.iter()).for_each(|(d, s)| *d = *s);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_kernel_for_sigma;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let x = random(16, 5, 1);
        for axis in [BlurAxis::Token1d, BlurAxis::Spatial2d] {
            let y = blur_group(x.view(), 1e-6, axis, Some((4, 4)), Padding::Replicate).unwrap();
            assert!(x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn constant_tokens_unchanged() {
        let x = Array2::from_elem((12, 3), 0.7);
        for axis in [BlurAxis::Token1d, BlurAxis::Spatial2d] {
            let y = blur_group(x.view(), 10.0, axis, Some((3, 4)), Padding::Replicate).unwrap();
            assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn token_blur_is_a_toeplitz_product() {
        let x = random(20, 6, 2);
        let y = blur_group(x.view(), 1.7, BlurAxis::Token1d, None, Padding::Zero).unwrap();
        let kernel = gaussian_kernel_for_sigma(1.7, 39).unwrap();
        let b = toeplitz_from_kernel(&kernel, 20, Padding::Zero).unwrap();
        // column by column, as an explicit matrix-vector product
        for c in 0..6 {
            let col = x.column(c);
            for i in 0..20 {
                let want: f64 = (0..20).map(|j| b.matrix()[(i, j)] * col[j]).sum();
                assert!((y[(i, c)] - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn spatial_blur_needs_consistent_grid() {
        let x = random(12, 2, 3);
        assert!(blur_group(x.view(), 1.0, BlurAxis::Spatial2d, Some((3, 3)), Padding::Zero).is_err());
        assert!(blur_group(x.view(), 1.0, BlurAxis::Spatial2d, None, Padding::Zero).is_err());
        assert!(blur_group(x.view(), 1.0, BlurAxis::Spatial2d, Some((3, 4)), Padding::Zero).is_ok());
    }

    #[test]
    fn plan_rejects_nonpositive_sigma() {
        let p = InterventionPlan::blur(BlurSpec::new(BlurTarget::QImg, 0.0));
        assert!(p.validate().is_err());
        assert!(InterventionPlan::blur(BlurSpec::new(BlurTarget::QImg, 10.0)).validate().is_ok());
    }
}
