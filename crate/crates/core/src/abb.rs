//! Background blending with a mask that switches from the subject's attention
//! footprint to the user mask once denoising reaches `tau`, plus the IoU-based
//! ranking used to pick which block's attention to trust.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::AttentionCapture;
use crate::error::{Error, Result};
use crate::numerics::{binarize, dilate, iou, max_connected_component, BinaryMask, Connectivity};
use crate::tensor::{LatentGrid, Mask};

pub const DEFAULT_GAMMA: f64 = 0.2;
pub const DEFAULT_DILATION: usize = 3;

/// Which block's cross-attention feeds the attention mask.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum LayerSelect {
    Fixed(usize),
    #[default]
    Last,
    /// The argmax of a previously computed ranking.
    IouBest(LayerRanking),
}

impl LayerSelect {
    pub fn resolve(&self, num_layers: usize) -> Result<usize> {
        let layer = match self {
            LayerSelect::Fixed(i) => *i,
            LayerSelect::Last => num_layers.checked_sub(1).ok_or_else(|| Error::invalid("no layers captured"))?,
            LayerSelect::IouBest(r) => r.best,
        };
        if layer >= num_layers {
            return Err(Error::invalid(format!("layer {layer} outside {num_layers} captured layers")));
        }
        Ok(layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbbConfig {
    pub gamma: f64,
    pub dilation: usize,
    pub tau: usize,
    pub layer: LayerSelect,
    pub connectivity: Connectivity,
    /// Text-token indices whose attention defines the subject footprint.
    pub subject_tokens: Vec<usize>,
    /// Blending runs after steps `blend_low ≤ t ≤ blend_high`.
    pub blend_high: usize,
    pub blend_low: usize,
    /// User mask at latent resolution.
    pub user_mask: Mask,
}

impl AbbConfig {
    pub fn new(start_step: usize, tau: usize, user_mask: Mask, subject_tokens: Vec<usize>) -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            dilation: DEFAULT_DILATION,
            tau,
            layer: LayerSelect::Last,
            connectivity: Connectivity::Eight,
            subject_tokens,
            blend_high: start_step,
            blend_low: 1,
            user_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("threshold {} outside [0,1]", self.gamma)));
        }
        if self.dilation == 0 || self.dilation % 2 == 0 {
            return Err(Error::invalid(format!("dilation kernel must be odd, got {}", self.dilation)));
        }
        if self.subject_tokens.is_empty() {
            return Err(Error::invalid("subject token set is empty"));
        }
        Ok(())
    }

    pub fn blends_at(&self, t: usize) -> bool {
        (self.blend_low..=self.blend_high).contains(&t)
    }
}

/// Which mask a blend used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Attention,
    User,
}

impl MaskSource {
    pub fn for_step(t: usize, tau: usize) -> Self {
        if t > tau {
            MaskSource::Attention
        } else {
            MaskSource::User
        }
    }
}

fn max_normalize(map: &Array2<f64>) -> Option<Array2<f64>> {
    let max = map.iter().copied().fold(0.0f64, f64::max);
    (max > 0.0).then(|| map.mapv(|v| v / max))
}

/// Subject footprint from captured attention: mean over `subject_tokens`, max-normalized,
/// thresholded at `gamma`, dilated, reduced to its largest component, then upsampled
/// from the token grid to latent resolution.
pub fn attention_mask(
    capture: &AttentionCapture,
    subject_tokens: &[usize],
    gamma: f64,
    dilation: usize,
    layer: usize,
) -> Result<BinaryMask> {
    attention_mask_with(capture, subject_tokens, gamma, dilation, layer, Connectivity::Eight)
}

pub fn attention_mask_with(
    capture: &AttentionCapture,
    subject_tokens: &[usize],
    gamma: f64,
    dilation: usize,
    layer: usize,
    connectivity: Connectivity,
) -> Result<BinaryMask> {
    let map = capture.subject_map(layer, subject_tokens)?;
    let (gh, gw) = map.dim();
    let coarse = match max_normalize(&map) {
        Some(norm) => {
            let bin = binarize(norm.view(), gamma)?;
            max_connected_component(&dilate(&bin, dilation)?, connectivity)
        }
        None => {
            if dilation == 0 || dilation % 2 == 0 {
                return Err(Error::invalid(format!("dilation kernel must be odd, got {dilation}")));
            }
            BinaryMask::empty(gh, gw)
        }
    };
    Ok(coarse.upsample(capture.patch.max(1)))
}

/// The attention mask while `t > tau`, the user mask afterwards.
pub fn adaptive_mask(t: usize, tau: usize, attn_mask: &BinaryMask, user_mask: &Mask) -> Result<Mask> {
    if attn_mask.shape() != user_mask.shape() {
        return Err(Error::invalid(format!(
            "attention mask {:?} and user mask {:?} differ in shape",
            attn_mask.shape(),
            user_mask.shape()
        )));
    }
    Ok(match MaskSource::for_step(t, tau) {
        MaskSource::Attention => attn_mask.to_mask(),
        MaskSource::User => user_mask.clone(),
    })
}

/// `M ⊙ z + (1 − M) ⊙ z_bg`, with `M` broadcast over channels. Cells where `M` is 0 or 1
/// copy the corresponding input exactly.
pub fn blend(z_t: &LatentGrid, z_bg: &LatentGrid, mask: &Mask) -> Result<LatentGrid> {
    z_t.ensure_same_shape(z_bg, "blend background")?;
    mask.ensure_matches(z_t, "blend mask")?;
    let m = mask.values();
    let mut out = z_t.clone();
    for ((c, y, x), v) in out.array_mut().indexed_iter_mut() {
        let w = m[(y, x)];
        let bg = z_bg.array()[(c, y, x)];
        *v = if w == 1.0 {
            *v
        } else if w == 0.0 {
            bg
        } else {
            w * *v + (1.0 - w) * bg
        };
    }
    Ok(out)
}

/// Mean IoU per block against ground truth, and the best block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRanking {
    pub scores: Vec<f64>,
    pub best: usize,
}

impl LayerRanking {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no layers to rank"));
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        Ok(Self { scores, best })
    }
}

/// Per-run, per-block binary masks: subject attention averaged over the run's steps,
/// max-normalized and thresholded at `gamma`, on the token grid.
pub fn averaged_masks(run: &[AttentionCapture], subject_tokens: &[usize], gamma: f64) -> Result<Vec<BinaryMask>> {
    let first = run.first().ok_or_else(|| Error::invalid("run has no captured steps"))?;
    let layers = first.num_layers();
    (0..layers)
        .map(|layer| {
            let mut sum = first.subject_map(layer, subject_tokens)?;
            for cap in &run[1..] {
                if cap.grid != first.grid || cap.num_layers() != layers {
                    return Err(Error::invalid("captures within a run differ in shape"));
                }
                sum += &cap.subject_map(layer, subject_tokens)?;
            }
            let mean = sum / run.len() as f64;
            match max_normalize(&mean) {
                Some(norm) => binarize(norm.view(), gamma),
                None => Ok(BinaryMask::empty(mean.nrows(), mean.ncols())),
            }
        })
        .collect()
}

/// Scores every block by the IoU of its averaged, binarized subject attention against
/// the ground-truth mask of each run, averaged over runs.
///
/// Ground truth may be given on the token grid or at latent resolution; the latter is
/// area-majority downsampled.
pub fn rank_layers_by_iou(
    runs: &[Vec<AttentionCapture>],
    ground_truth: &[BinaryMask],
    subject_tokens: &[usize],
    gamma: f64,
) -> Result<LayerRanking> {
    if runs.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} runs but {} ground-truth masks",
            runs.len(),
            ground_truth.len()
        )));
    }
    if runs.is_empty() {
        return Err(Error::invalid("no runs to rank"));
    }
    let mut totals: Vec<f64> = Vec::new();
    for (run, gt) in runs.iter().zip(ground_truth) {
        let masks = averaged_masks(run, subject_tokens, gamma)?;
        let grid = run[0].grid;
        let gt = if gt.shape() == grid {
            gt.clone()
        } else {
            BinaryMask::downsample_majority(&gt.to_mask(), run[0].patch)?
        };
        if totals.is_empty() {
            totals = vec![0.0; masks.len()];
        } else if totals.len() != masks.len() {
            return Err(Error::invalid("runs captured different numbers of layers"));
        }
        for (total, m) in totals.iter_mut().zip(&masks) {
            *total += iou(m, &gt)?;
        }
    }
    let n = runs.len() as f64;
    LayerRanking::from_scores(totals.into_iter().map(|s| s / n).collect())
}
