//! Toy joint-attention velocity model with adapter conditioning and intervention hooks.
//!
//! Text and image tokens run through per-stream projections and meet in a single
//! softmax attention per block. An [`InterventionPlan`] can Gaussian-blur any of the
//! six Q/K/V groups in every block and record the image→text attention maps.

mod intervention;
mod model;
mod tokens;

pub use intervention::{blur_group, BlurAxis, BlurSpec, BlurTarget, InterventionPlan};
pub use model::{
    head_logits, predict_velocity, Adapter, AdapterParams, AttentionCapture, Backbone, LayerCapture,
    ModelParams, QkvSnapshot,
};
pub use tokens::{TokenGroup, TokenSeq};
pub(crate) use tokens::{patchify, unpatchify};
