#![allow(dead_code)]

use shine_lab::backbone::{Adapter, AdapterParams, Backbone, InterventionPlan, ModelParams, TokenSeq};
use shine_lab::msa::{compute_anchor, msa_gradient, msa_loss, AnchorVelocity};
use shine_lab::scheduler::NoiseSource;
use shine_lab::LatentGrid;

const PROMPTS: [&str; 5] = ["a photo of a dog", "a cat on a sofa", "a red vase", "a small toy robot", "a bird"];

pub struct MsaInstance {
    pub model: Backbone,
    pub adapter: Adapter,
    pub z: LatentGrid,
    pub subject: LatentGrid,
    pub text: TokenSeq,
    pub t: usize,
}

/// Seeded toy instance at the first optimized step of the default schedule.
pub fn msa_instance(seed: u64) -> MsaInstance {
    let params = ModelParams::default();
    let mut noise = NoiseSource::new(seed, 50);
    MsaInstance {
        model: Backbone::new(params.clone()).unwrap(),
        adapter: Adapter::new(AdapterParams::default(), &params).unwrap(),
        z: noise.next_grid(12, 16, 16),
        subject: noise.next_grid(12, 8, 8),
        text: TokenSeq::from_prompt(PROMPTS[seed as usize % PROMPTS.len()], 32, seed),
        t: 14,
    }
}

impl MsaInstance {
    pub fn adapter_velocity(&self, z: &LatentGrid) -> LatentGrid {
        self.model
            .predict_velocity(Some(&self.adapter), z, self.t, &self.text, Some(&self.subject), &InterventionPlan::none())
            .unwrap()
            .0
    }

    pub fn anchor(&self) -> AnchorVelocity {
        compute_anchor(&self.model, &self.z, self.t, &self.text).unwrap()
    }

    /// `⟨g, ∇L⟩ / ‖g‖` for the Jacobian-omitted gradient `g`, with `∇L` taken by central
    /// differences along `g` at step `h`.
    pub fn fd_alignment(&self, h: f64) -> f64 {
        let anchor = self.anchor();
        let loss = |z: &LatentGrid| msa_loss(&self.adapter_velocity(z), &anchor).unwrap();
        let g = msa_gradient(&self.adapter_velocity(&self.z), &anchor).unwrap();
        let step = g.scale(h / g.norm());
        (loss(&self.z.add(&step).unwrap()) - loss(&self.z.sub(&step).unwrap())) / (2.0 * h)
    }
}
