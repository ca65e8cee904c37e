//! End-to-end composition: toy codec, configuration, the denoising loop with its
//! per-step report, and the diagnostic studies behind the CLI.

mod assets;
mod codec;
mod compose;
mod config;
mod study;

pub use assets::{synth_inputs, MASK_ALIGN};
pub use codec::{LatentCodec, PixelGrid, CODEC_PATCH, PIXEL_CHANNELS};
pub use compose::{
    compose, BlendEvent, CompositionInputs, Composer, DsgRecord, LatentInputs, MaskRecord, NoopObserver, RunReport,
    StepObserver, StepRecord,
};
pub use config::{load_ranking, save_ranking, CompositionConfig};
pub use study::{
    equivalence_suite, perturb_study, EquivalenceCase, EquivalenceReport, PerturbRow, PerturbTable,
    EQUIVALENCE_TOLERANCE, KEY_BLUR_MARGIN,
};
