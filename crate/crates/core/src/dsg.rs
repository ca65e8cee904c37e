//! Guidance away from a deliberately degraded prediction.
//!
//! The negative velocity is the same adapter-conditioned call with the image queries
//! Gaussian-blurred in every block; the guided velocity extrapolates away from it,
//! `v + η(v − v_neg)`.

use crate::backbone::{Adapter, Backbone, BlurAxis, BlurSpec, BlurTarget, InterventionPlan, TokenSeq};
use crate::error::{Error, Result};
use crate::numerics::Padding;
use crate::tensor::LatentGrid;

pub const DEFAULT_ETA: f64 = 0.5;
pub const DEFAULT_BLUR_SIGMA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DsgConfig {
    pub eta: f64,
    /// In image-token grid units.
    pub blur_sigma: f64,
    pub blur_axis: BlurAxis,
    pub padding: Padding,
    /// Guidance applies for `active_low ≤ t ≤ active_high`.
    pub active_high: usize,
    pub active_low: usize,
}

impl DsgConfig {
    pub fn new(start_step: usize) -> Self {
        Self {
            eta: DEFAULT_ETA,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            blur_axis: BlurAxis::Token1d,
            padding: Padding::Replicate,
            active_high: start_step,
            active_low: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid(format!("guidance scale must be non-negative, got {}", self.eta)));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::invalid(format!("blur sigma must be positive, got {}", self.blur_sigma)));
        }
        if self.active_low > self.active_high {
            return Err(Error::invalid("guidance range is empty"));
        }
        Ok(())
    }

    pub fn is_active(&self, t: usize) -> bool {
        (self.active_low..=self.active_high).contains(&t)
    }

    pub fn blur_spec(&self) -> BlurSpec {
        BlurSpec::new(BlurTarget::QImg, self.blur_sigma)
            .with_axis(self.blur_axis)
            .with_padding(self.padding)
    }
}

/// Adapter-conditioned velocity with `Q_img` blurred by `blur`; every other input is
/// shared with the positive call.
#[allow(clippy::too_many_arguments)]
pub fn negative_velocity(
    model: &Backbone,
    adapter: Option<&Adapter>,
    z_t: &LatentGrid,
    t: usize,
    text: &TokenSeq,
    subject: Option<&LatentGrid>,
    blur: BlurSpec,
) -> Result<LatentGrid> {
    if blur.target != BlurTarget::QImg {
        return Err(Error::invalid(format!("negative branch blurs Q_img, not {}", blur.target)));
    }
    let (v, _) = model.predict_velocity(adapter, z_t, t, text, subject, &InterventionPlan::blur(blur))?;
    Ok(v)
}

/// `v_pos + η·(v_pos − v_neg)`.
pub fn dsg_combine(v_pos: &LatentGrid, v_neg: &LatentGrid, eta: f64) -> Result<LatentGrid> {
    v_pos.ensure_same_shape(v_neg, "guidance")?;
    let mut out = v_pos.array().clone();
    out.zip_mut_with(v_neg.array(), |p, n| *p += eta * (*p - n));
    Ok(LatentGrid::from_array(out))
}
