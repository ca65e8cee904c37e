//! Score every block by how well its averaged subject attention overlaps a
//! ground-truth mask, across several composition runs.

use shine_lab::abb::rank_layers_by_iou;
use shine_lab::backbone::AttentionCapture;
use shine_lab::numerics::BinaryMask;
use shine_lab::pipeline::{synth_inputs, CompositionConfig, Composer, StepObserver, CODEC_PATCH};

#[derive(Default)]
struct Captures(Vec<AttentionCapture>);

impl StepObserver for Captures {
    fn on_capture(&mut self, _t: usize, capture: &AttentionCapture) {
        self.0.push(capture.clone());
    }
}

fn main() -> shine_lab::Result<()> {
    let mut runs = Vec::new();
    let mut truths = Vec::new();
    let mut tokens = Vec::new();
    for seed in 0..4 {
        let inputs = synth_inputs(seed, 32, 16)?;
        let composer = Composer::new(CompositionConfig { seed, ..CompositionConfig::default() })?;
        let latents = composer.prepare(&inputs)?;
        let mut log = Captures::default();
        composer.compose_latents(&latents, &mut log)?;
        runs.push(log.0);
        truths.push(BinaryMask::downsample_majority(&inputs.mask, CODEC_PATCH)?);
        tokens = latents.subject_tokens;
    }
    let ranking = rank_layers_by_iou(&runs, &truths, &tokens, 0.2)?;
    for (layer, score) in ranking.scores.iter().enumerate() {
        println!("layer {layer}: mean IoU {score:.4}");
    }
    println!("best layer: {}", ranking.best);
    println!("{}", serde_json::to_string(&ranking).expect("ranking serializes"));
    Ok(())
}
