use serde::Serialize;

use crate::abb::{adaptive_mask, attention_mask_with, blend, AbbConfig, MaskSource};
use crate::backbone::{Adapter, AttentionCapture, Backbone, InterventionPlan, TokenSeq};
use crate::dsg::{dsg_combine, negative_velocity, DsgConfig};
use crate::error::{Error, Result};
use crate::msa::{run_msa_inner_loop, MsaConfig, MsaTrace};
use crate::numerics::BinaryMask;
use crate::pipeline::codec::{LatentCodec, PixelGrid, CODEC_PATCH, PIXEL_CHANNELS};
use crate::pipeline::config::CompositionConfig;
use crate::scheduler::{
    euler_step, forward_diffuse, make_schedule, noisy_background, NoiseSource, BACKGROUND_STREAM, INIT_STREAM,
};
use crate::tensor::{LatentGrid, Mask};

/// Pixel-space inputs. Background, initialization and mask share a size.
#[derive(Debug, Clone)]
pub struct CompositionInputs {
    pub background: PixelGrid,
    /// The background with the subject roughly inpainted into the masked region.
    pub init: PixelGrid,
    pub subject: PixelGrid,
    /// User mask at pixel resolution.
    pub mask: Mask,
    pub prompt: String,
}

impl CompositionInputs {
    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.background.shape();
        if self.init.shape() != self.background.shape() {
            return Err(Error::invalid(format!(
                "initialization {:?} and background {:?} differ in shape",
                self.init.shape(),
                self.background.shape()
            )));
        }
        if self.mask.shape() != (h, w) {
            return Err(Error::invalid(format!(
                "mask {:?} does not match the {h}x{w} background",
                self.mask.shape()
            )));
        }
        Ok(())
    }
}

/// Inputs after encoding: everything the denoising loop touches.
#[derive(Debug, Clone)]
pub struct LatentInputs {
    pub background: LatentGrid,
    pub init: LatentGrid,
    pub subject: LatentGrid,
    /// User mask at latent resolution.
    pub user_mask: Mask,
    pub text: TokenSeq,
    pub subject_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DsgRecord {
    pub eta: f64,
    pub positive_norm: f64,
    pub negative_norm: f64,
    pub guided_norm: f64,
    /// `‖v_pos − v_neg‖`.
    pub gap_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRecord {
    pub source: MaskSource,
    pub layer: usize,
    pub coverage: f64,
    pub attention_coverage: f64,
}

/// One executed step `t`. The record for `t = 0` is terminal: it carries the final
/// latent and no update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub sigma: f64,
    pub sigma_prev: Option<f64>,
    pub msa: Option<MsaTrace>,
    pub dsg: Option<DsgRecord>,
    pub mask: Option<MaskRecord>,
    pub latent_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub final_checksum: String,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything visible at one blend, for instrumentation.
pub struct BlendEvent<'a> {
    pub t: usize,
    pub source: MaskSource,
    pub attention_mask: &'a BinaryMask,
    pub mask: &'a Mask,
    pub denoised: &'a LatentGrid,
    pub background: &'a LatentGrid,
    pub blended: &'a LatentGrid,
}

/// Hooks into the denoising loop. All methods default to doing nothing.
pub trait StepObserver {
    fn on_capture(&mut self, _t: usize, _capture: &AttentionCapture) {}
    fn on_blend(&mut self, _event: &BlendEvent<'_>) {}
}

pub struct NoopObserver;

impl StepObserver for NoopObserver {}

/// A built model, adapter and codec for one configuration.
pub struct Composer {
    config: CompositionConfig,
    model: Backbone,
    adapter: Adapter,
    codec: LatentCodec,
}

impl Composer {
    pub fn new(config: CompositionConfig) -> Result<Self> {
        config.validate()?;
        let model = Backbone::new(config.model.clone())?;
        let adapter = Adapter::new(config.adapter.clone(), &config.model)?;
        let codec = LatentCodec::new(config.codec_seed, PIXEL_CHANNELS, CODEC_PATCH)?;
        Ok(Self { config, model, adapter, codec })
    }

    pub fn config(&self) -> &CompositionConfig {
        &self.config
    }

    pub fn model(&self) -> &Backbone {
        &self.model
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn codec(&self) -> &LatentCodec {
        &self.codec
    }

    /// Encodes the images, downsamples the mask by area majority and tokenizes the prompt.
    pub fn prepare(&self, inputs: &CompositionInputs) -> Result<LatentInputs> {
        inputs.validate()?;
        let text = TokenSeq::from_prompt(&inputs.prompt, self.config.model.dim, self.config.text_seed);
        let subject_tokens = self.config.resolve_subject_tokens(&text)?;
        let user_mask = BinaryMask::downsample_majority(&inputs.mask, self.codec.patch())?.to_mask();
        Ok(LatentInputs {
            background: self.codec.encode(&inputs.background)?,
            init: self.codec.encode(&inputs.init)?,
            subject: self.codec.encode(&inputs.subject)?,
            user_mask,
            text,
            subject_tokens,
        })
    }

    pub fn compose(&self, inputs: &CompositionInputs) -> Result<(PixelGrid, RunReport)> {
        self.compose_observed(inputs, &mut NoopObserver)
    }

    pub fn compose_observed(
        &self,
        inputs: &CompositionInputs,
        observer: &mut dyn StepObserver,
    ) -> Result<(PixelGrid, RunReport)> {
        let latents = self.prepare(inputs)?;
        let (z0, report) = self.compose_latents(&latents, observer)?;
        Ok((self.codec.decode(&z0)?, report))
    }

    /// The denoising loop on latents, from `start_step` down to 0.
    pub fn compose_latents(
        &self,
        inputs: &LatentInputs,
        observer: &mut dyn StepObserver,
    ) -> Result<(LatentGrid, RunReport)> {
        let cfg = &self.config;
        let z_bg = &inputs.background;
        z_bg.ensure_same_shape(&inputs.init, "initialization latent")?;
        inputs.user_mask.ensure_matches(z_bg, "user mask")?;
        let msa = cfg.msa_config(inputs.user_mask.clone());
        let dsg = cfg.dsg_config();
        let abb = cfg.abb_config(inputs.user_mask.clone(), inputs.subject_tokens.clone());
        abb.validate()?;

        let schedule = make_schedule(cfg.steps)?;
        let mut init_noise = NoiseSource::new(cfg.seed, INIT_STREAM);
        let mut bg_noise = NoiseSource::new(cfg.background_seed(), BACKGROUND_STREAM);
        let t1 = cfg.start_step;
        let mut z = forward_diffuse(&inputs.init, schedule.sigma(t1)?, &mut init_noise)?;

        let mut steps = Vec::with_capacity(t1 + 1);
        for t in (1..=t1).rev() {
            let ctx = StepContext { composer: self, inputs, msa: &msa, dsg: &dsg, abb: &abb };
            let (next, record) = ctx
                .step(z, t, schedule.sigma(t)?, schedule.sigma(t - 1)?, &mut bg_noise, observer)
                .map_err(|e| e.at_step(t))?;
            z = next;
            steps.push(record);
        }
        let final_checksum = z.checksum();
        steps.push(StepRecord {
            t: 0,
            sigma: schedule.sigma(0)?,
            sigma_prev: None,
            msa: None,
            dsg: None,
            mask: None,
            latent_checksum: final_checksum.clone(),
        });
        Ok((z, RunReport { steps, final_checksum }))
    }
}

struct StepContext<'a> {
    composer: &'a Composer,
    inputs: &'a LatentInputs,
    msa: &'a MsaConfig,
    dsg: &'a DsgConfig,
    abb: &'a AbbConfig,
}

impl StepContext<'_> {
    fn step(
        &self,
        mut z: LatentGrid,
        t: usize,
        sigma: f64,
        sigma_prev: f64,
        bg_noise: &mut NoiseSource,
        observer: &mut dyn StepObserver,
    ) -> Result<(LatentGrid, StepRecord)> {
        let Composer { model, adapter, .. } = self.composer;
        let inp = self.inputs;

        let mut msa_trace = None;
        if self.msa.is_active(t) {
            let (moved, trace) = run_msa_inner_loop(model, adapter, &z, t, &inp.text, &inp.subject, self.msa)?;
            z = moved;
            msa_trace = Some(trace);
        }

        let (v, capture) =
            model.predict_velocity(Some(adapter), &z, t, &inp.text, Some(&inp.subject), &InterventionPlan::capture())?;
        observer.on_capture(t, &capture);

        let mut dsg_record = None;
        let v_guided = if self.dsg.is_active(t) && self.dsg.eta != 0.0 {
            let v_neg = negative_velocity(model, Some(adapter), &z, t, &inp.text, Some(&inp.subject), self.dsg.blur_spec())?;
            let guided = dsg_combine(&v, &v_neg, self.dsg.eta)?;
            dsg_record = Some(DsgRecord {
                eta: self.dsg.eta,
                positive_norm: v.norm(),
                negative_norm: v_neg.norm(),
                guided_norm: guided.norm(),
                gap_norm: v.sub(&v_neg)?.norm(),
            });
            guided
        } else {
            v
        };

        let denoised = euler_step(&z, &v_guided, sigma, sigma_prev)?;
        let z_bg = noisy_background(&inp.background, sigma_prev, bg_noise)?;

        let mut mask_record = None;
        let next = if self.abb.blends_at(t) {
            let layer = self.abb.layer.resolve(capture.num_layers())?;
            let attn = attention_mask_with(
                &capture,
                &inp.subject_tokens,
                self.abb.gamma,
                self.abb.dilation,
                layer,
                self.abb.connectivity,
            )?;
            let mask = adaptive_mask(t, self.abb.tau, &attn, &self.abb.user_mask)?;
            let blended = blend(&denoised, &z_bg, &mask)?;
            let source = MaskSource::for_step(t, self.abb.tau);
            observer.on_blend(&BlendEvent {
                t,
                source,
                attention_mask: &attn,
                mask: &mask,
                denoised: &denoised,
                background: &z_bg,
                blended: &blended,
            });
            let (h, w) = attn.shape();
            mask_record = Some(MaskRecord {
                source,
                layer,
                coverage: mask.coverage(),
                attention_coverage: attn.count() as f64 / (h * w) as f64,
            });
            blended
        } else {
            denoised
        };

        let record = StepRecord {
            t,
            sigma,
            sigma_prev: Some(sigma_prev),
            msa: msa_trace,
            dsg: dsg_record,
            mask: mask_record,
            latent_checksum: next.checksum(),
        };
        Ok((next, record))
    }
}

/// Runs one composition with a freshly built model.
pub fn compose(inputs: &CompositionInputs, config: CompositionConfig) -> Result<(PixelGrid, RunReport)> {
    Composer::new(config)?.compose(inputs)
}
