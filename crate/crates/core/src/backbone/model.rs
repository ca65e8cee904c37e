use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::intervention::{blur_group, BlurAxis, BlurTarget, InterventionPlan};
use super::tokens::{patchify, sinusoid, unpatchify, TokenSeq};
use crate::error::{Error, Result};
use crate::numerics::{deterministic_mode, softmax_in_place};
use crate::tensor::LatentGrid;

const LN_EPS: f64 = 1e-6;
const MODULATION_GAIN: f64 = 0.1;
const HEAD_GAIN: f64 = 0.25;
const ADAPTER_DELTA_GAIN: f64 = 0.5;

/// Architecture and seed of the toy joint-attention backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelParams {
    pub seed: u64,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Side of the square latent patch that becomes one image token.
    pub patch: usize,
    pub latent_channels: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { seed: 0, layers: 4, dim: 32, heads: 4, patch: 2, latent_channels: 12 }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 || self.latent_channels == 0 {
            return Err(Error::invalid("model sizes must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::invalid("dim must be a multiple of 4 for the position code"));
        }
        Ok(())
    }

    fn token_width(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }
}

/// Subject-conditioning augmentation. `strength = 0` reduces the augmented model to
/// the base model exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub seed: u64,
    pub strength: f64,
}

impl Default for AdapterParams {
    fn default() -> Self {
        Self { seed: 1, strength: 1.0 }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Array2<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
        Self { w: Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng)) }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w)
    }
}

fn rng_for(seed: u64, scope: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"shine-lab/weights/");
    hasher.update(scope.as_bytes());
    hasher.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

#[derive(Debug, Clone)]
struct Stream {
    modulation: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl Stream {
    fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Self {
            modulation: Linear::init(rng, d, 4 * d, MODULATION_GAIN),
            q: Linear::init(rng, d, d, 1.0),
            k: Linear::init(rng, d, d, 1.0),
            v: Linear::init(rng, d, d, 1.0),
            o: Linear::init(rng, d, d, 1.0),
            mlp_in: Linear::init(rng, d, 4 * d, 1.0),
            mlp_out: Linear::init(rng, 4 * d, d, 0.5),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        for (name, l) in [
            ("modulation", &self.modulation),
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("o", &self.o),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
        ] {
            out.push((format!("{prefix}.{name}"), &l.w));
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    txt: Stream,
    img: Stream,
}

/// The toy velocity model: MMDiT-style blocks with one joint attention over text and
/// image tokens, per-stream projections, and timestep modulation.
#[derive(Debug, Clone)]
pub struct Backbone {
    params: ModelParams,
    patch_in: Linear,
    txt_in: Linear,
    time_in: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
}

#[derive(Debug, Clone)]
struct AdapterBlock {
    k_subj: Linear,
    v_subj: Linear,
    dq: Linear,
    dk: Linear,
    dv: Linear,
}

/// Adapter weights built for a particular backbone shape.
///
/// Subject latent patches become extra key/value tokens whose attention weight is
/// multiplied by `strength`; the image-stream Q/K/V projections receive
/// `strength`-scaled additive deltas.
#[derive(Debug, Clone)]
pub struct Adapter {
    params: AdapterParams,
    subject_in: Linear,
    blocks: Vec<AdapterBlock>,
}

impl Adapter {
    pub fn new(params: AdapterParams, model: &ModelParams) -> Result<Self> {
        model.validate()?;
        if !(params.strength >= 0.0) || !params.strength.is_finite() {
            return Err(Error::invalid(format!(
                "adapter strength must be finite and non-negative, got {}",
                params.strength
            )));
        }
        let d = model.dim;
        let mut rng = rng_for(params.seed, "adapter");
        let subject_in = Linear::init(&mut rng, model.token_width(), d, 1.0);
        let blocks = (0..model.layers)
            .map(|_| AdapterBlock {
                k_subj: Linear::init(&mut rng, d, d, 1.0),
                v_subj: Linear::init(&mut rng, d, d, 1.0),
                dq: Linear::init(&mut rng, d, d, ADAPTER_DELTA_GAIN),
                dk: Linear::init(&mut rng, d, d, ADAPTER_DELTA_GAIN),
                dv: Linear::init(&mut rng, d, d, ADAPTER_DELTA_GAIN),
            })
            .collect();
        Ok(Self { params, subject_in, blocks })
    }

    pub fn params(&self) -> &AdapterParams {
        &self.params
    }

    pub fn strength(&self) -> f64 {
        self.params.strength
    }

    /// Same weights, different strength.
    pub fn with_strength(&self, strength: f64) -> Result<Self> {
        if !(strength >= 0.0) || !strength.is_finite() {
            return Err(Error::invalid(format!("adapter strength must be non-negative, got {strength}")));
        }
        let mut out = self.clone();
        out.params.strength = strength;
        Ok(out)
    }
}

/// Joint Q/K/V actually used by one attention layer (after adapter deltas and blur).
/// Query rows are `[txt, img]`; key/value rows are `[txt, img, subj]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvSnapshot {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub n_txt: usize,
    pub n_img: usize,
    pub n_subj: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerCapture {
    /// Image-query → text-key attention, mean over heads, rows renormalized over the
    /// text tokens. Shape `n_img × n_txt`.
    pub cross_attn: Option<Array2<f64>>,
    pub qkv: Option<QkvSnapshot>,
}

/// What a backbone call recorded, one entry per block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionCapture {
    /// Image-token grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Latent cells per token side.
    pub patch: usize,
    pub layers: Vec<LayerCapture>,
}

impl AttentionCapture {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cross_attn(&self, layer: usize) -> Result<&Array2<f64>> {
        self.layers
            .get(layer)
            .and_then(|l| l.cross_attn.as_ref())
            .ok_or_else(|| Error::invalid(format!("no cross-attention captured for layer {layer}")))
    }

    /// Mean attention onto the given text tokens, reshaped onto the image-token grid.
    pub fn subject_map(&self, layer: usize, subject_tokens: &[usize]) -> Result<Array2<f64>> {
        if subject_tokens.is_empty() {
            return Err(Error::invalid("subject token set is empty"));
        }
        let a = self.cross_attn(layer)?;
        if let Some(bad) = subject_tokens.iter().find(|i| **i >= a.ncols()) {
            return Err(Error::invalid(format!(
                "subject token {bad} outside {} text tokens",
                a.ncols()
            )));
        }
        let (gh, gw) = self.grid;
        let per_token: Array1<f64> = a
            .rows()
            .into_iter()
            .map(|row| subject_tokens.iter().map(|i| row[*i]).sum::<f64>() / subject_tokens.len() as f64)
            .collect();
        per_token
            .into_shape_with_order((gh, gw))
            .map_err(|e| Error::invalid(format!("capture grid {gh}x{gw}: {e}")))
    }
}

fn layer_norm(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    let d = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn modulate(x: &Array2<f64>, shift: &[f64], scale: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * (1.0 + scale[j]) + shift[j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn position_code(gh: usize, gw: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((gh * gw, d));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let py = sinusoid(gy as f64, d / 2);
            let px = sinusoid(gx as f64, d / 2);
            for j in 0..d / 2 {
                out[(row, j)] = py[j];
                out[(row, d / 2 + j)] = px[j];
            }
        }
    }
    out
}

/// Attention logits of one head, `Q_h K_hᵀ / √d_h`.
pub fn head_logits(q: ArrayView2<f64>, k: ArrayView2<f64>, heads: usize, head: usize) -> Array2<f64> {
    let dh = q.ncols() / heads;
    let cols = s![.., head * dh..(head + 1) * dh];
    q.slice(cols).dot(&k.slice(cols).t()) / (dh as f64).sqrt()
}

struct JointOut {
    out: Array2<f64>,
    cross: Option<Array2<f64>>,
}

/// Softmax attention of `[txt, img]` queries over `[txt, img, subj]` keys. Subject keys
/// get `ln(subject_gate)` added to their logits.
fn joint_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    n_txt: usize,
    n_subj: usize,
    subject_gate: f64,
    capture: bool,
) -> JointOut {
    let nq = q.nrows();
    let nk = k.nrows();
    let dh = q.ncols() / heads;
    let gate = subject_gate.ln();
    let per_head = |h: usize| {
        let mut logits = head_logits(q.view(), k.view(), heads, h);
        if n_subj > 0 {
            logits.slice_mut(s![.., nk - n_subj..]).mapv_inplace(|x| x + gate);
        }
        for mut row in logits.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let out = logits.dot(&v.slice(s![.., h * dh..(h + 1) * dh]));
        let cross = capture.then(|| logits.slice(s![n_txt..nq, 0..n_txt]).to_owned());
        (out, cross)
    };
    let results: Vec<_> = if deterministic_mode() {
        (0..heads).map(per_head).collect()
    } else {
        (0..heads).into_par_iter().map(per_head).collect()
    };
    let views: Vec<_> = results.iter().map(|(o, _)| o.view()).collect();
    let out = concatenate(Axis(1), &views).expect("heads share row count");
    let cross = capture.then(|| {
        let mut mean = Array2::<f64>::zeros((nq - n_txt, n_txt));
        for (_, c) in &results {
            mean += c.as_ref().expect("captured");
        }
        for mut row in mean.rows_mut() {
            let total = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|x| x / total);
            }
        }
        mean
    });
    JointOut { out, cross }
}

fn blur_if(
    x: Array2<f64>,
    target: BlurTarget,
    plan: &InterventionPlan,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    match &plan.blur {
        Some(spec) if spec.target == target => {
            let axis = if target.is_image() { spec.axis } else { BlurAxis::Token1d };
            blur_group(x.view(), spec.sigma, axis, Some(grid), spec.padding)
        }
        _ => Ok(x),
    }
}

fn check_latent(z: &LatentGrid, params: &ModelParams, what: &str) -> Result<()> {
    let (c, h, w) = z.shape();
    if c != params.latent_channels {
        return Err(Error::invalid(format!(
            "{what} has {c} channels, model expects {}",
            params.latent_channels
        )));
    }
    if h == 0 || w == 0 || h % params.patch != 0 || w % params.patch != 0 {
        return Err(Error::invalid(format!(
            "{what} of {h}x{w} is not divisible by patch {}",
            params.patch
        )));
    }
    if !z.is_finite() {
        return Err(Error::invalid(format!("{what} contains non-finite values")));
    }
    Ok(())
}

impl Backbone {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let d = params.dim;
        let mut rng = rng_for(params.seed, "backbone");
        let patch_in = Linear::init(&mut rng, params.token_width(), d, 1.0);
        let txt_in = Linear::init(&mut rng, d, d, 1.0);
        let time_in = Linear::init(&mut rng, d, d, 1.0);
        let blocks = (0..params.layers)
            .map(|_| Block { txt: Stream::init(&mut rng, d), img: Stream::init(&mut rng, d) })
            .collect();
        let final_modulation = Linear::init(&mut rng, d, 2 * d, MODULATION_GAIN);
        let head = Linear::init(&mut rng, d, params.token_width(), HEAD_GAIN);
        Ok(Self { params, patch_in, txt_in, time_in, blocks, final_modulation, head })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Every weight matrix with a stable name, in generation order.
    pub fn named_weights(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("patch_in".to_string(), &self.patch_in.w),
            ("txt_in".to_string(), &self.txt_in.w),
            ("time_in".to_string(), &self.time_in.w),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.txt.named(&format!("block{i}.txt"), &mut out);
            b.img.named(&format!("block{i}.img"), &mut out);
        }
        out.push(("final_modulation".to_string(), &self.final_modulation.w));
        out.push(("head".to_string(), &self.head.w));
        out
    }

    /// Velocity at `z_t`, with optional adapter conditioning on `subject` and the
    /// interventions of `plan`.
    pub fn predict_velocity(
        &self,
        adapter: Option<&Adapter>,
        z_t: &LatentGrid,
        t: usize,
        text: &TokenSeq,
        subject: Option<&LatentGrid>,
        plan: &InterventionPlan,
    ) -> Result<(LatentGrid, AttentionCapture)> {
        let p = &self.params;
        let d = p.dim;
        check_latent(z_t, p, "latent")?;
        match (adapter, subject) {
            (Some(_), None) => return Err(Error::invalid("adapter given without a subject latent")),
            (None, Some(_)) => return Err(Error::invalid("subject latent given without an adapter")),
            (Some(a), Some(s)) => {
                check_latent(s, p, "subject latent")?;
                if a.blocks.len() != p.layers {
                    return Err(Error::invalid("adapter was built for a different backbone"));
                }
            }
            (None, None) => {}
        }
        if text.dim() != d || text.is_empty() {
            return Err(Error::invalid(format!(
                "text tokens must be non-empty with width {d}, got {}x{}",
                text.len(),
                text.dim()
            )));
        }
        plan.validate()?;

        let (c, h, w) = z_t.shape();
        let grid = (h / p.patch, w / p.patch);
        let n_txt = text.len();
        let n_img = grid.0 * grid.1;

        let mut x_img = self.patch_in.forward(patchify(z_t, p.patch)?.view()) + position_code(grid.0, grid.1, d);
        let mut x_txt = self.txt_in.forward(text.tokens());
        let temb = Array2::from_shape_vec((1, d), sinusoid(t as f64, d)).expect("1 x d");
        let temb = self.time_in.forward(temb.view()).mapv(silu);

        let active = adapter.zip(subject).filter(|(a, _)| a.strength() > 0.0);
        let subject_tokens = match active {
            Some((a, s)) => {
                let (_, sh, sw) = s.shape();
                let raw = a.subject_in.forward(patchify(s, p.patch)?.view())
                    + position_code(sh / p.patch, sw / p.patch, d);
                Some(layer_norm(raw.view()))
            }
            None => None,
        };
        let n_subj = subject_tokens.as_ref().map_or(0, |s| s.nrows());

        let mut capture = AttentionCapture { grid, patch: p.patch, layers: Vec::new() };
        for (j, block) in self.blocks.iter().enumerate() {
            let m_img = block.img.modulation.forward(temb.view());
            let m_txt = block.txt.modulation.forward(temb.view());
            let m_img = m_img.row(0).to_vec();
            let m_txt = m_txt.row(0).to_vec();
            let h_img = modulate(&layer_norm(x_img.view()), &m_img[0..d], &m_img[d..2 * d]);
            let h_txt = modulate(&layer_norm(x_txt.view()), &m_txt[0..d], &m_txt[d..2 * d]);

            let mut q_img = block.img.q.forward(h_img.view());
            let mut k_img = block.img.k.forward(h_img.view());
            let mut v_img = block.img.v.forward(h_img.view());
            if let Some((a, _)) = active {
                let ab = &a.blocks[j];
                let s = a.strength();
                q_img.scaled_add(s, &ab.dq.forward(h_img.view()));
                k_img.scaled_add(s, &ab.dk.forward(h_img.view()));
                v_img.scaled_add(s, &ab.dv.forward(h_img.view()));
            }
            let q_txt = blur_if(block.txt.q.forward(h_txt.view()), BlurTarget::QTxt, plan, grid)?;
            let k_txt = blur_if(block.txt.k.forward(h_txt.view()), BlurTarget::KTxt, plan, grid)?;
            let v_txt = blur_if(block.txt.v.forward(h_txt.view()), BlurTarget::VTxt, plan, grid)?;
            let q_img = blur_if(q_img, BlurTarget::QImg, plan, grid)?;
            let k_img = blur_if(k_img, BlurTarget::KImg, plan, grid)?;
            let v_img = blur_if(v_img, BlurTarget::VImg, plan, grid)?;

            let q = concatenate(Axis(0), &[q_txt.view(), q_img.view()]).expect("same width");
            let (k, v) = match (&subject_tokens, active) {
                (Some(st), Some((a, _))) => {
                    let ab = &a.blocks[j];
                    let ks = ab.k_subj.forward(st.view());
                    let vs = ab.v_subj.forward(st.view());
                    (
                        concatenate(Axis(0), &[k_txt.view(), k_img.view(), ks.view()]).expect("same width"),
                        concatenate(Axis(0), &[v_txt.view(), v_img.view(), vs.view()]).expect("same width"),
                    )
                }
                _ => (
                    concatenate(Axis(0), &[k_txt.view(), k_img.view()]).expect("same width"),
                    concatenate(Axis(0), &[v_txt.view(), v_img.view()]).expect("same width"),
                ),
            };
            let gate = active.map_or(1.0, |(a, _)| a.strength());
            let attn = joint_attention(&q, &k, &v, p.heads, n_txt, n_subj, gate, plan.capture_cross_attn);

            x_txt += &block.txt.o.forward(attn.out.slice(s![0..n_txt, ..]));
            x_img += &block.img.o.forward(attn.out.slice(s![n_txt.., ..]));

            let h_img = modulate(&layer_norm(x_img.view()), &m_img[2 * d..3 * d], &m_img[3 * d..]);
            let h_txt = modulate(&layer_norm(x_txt.view()), &m_txt[2 * d..3 * d], &m_txt[3 * d..]);
            x_img += &block.img.mlp_out.forward(block.img.mlp_in.forward(h_img.view()).mapv(gelu).view());
            x_txt += &block.txt.mlp_out.forward(block.txt.mlp_in.forward(h_txt.view()).mapv(gelu).view());

            if plan.capture_cross_attn || plan.capture_qkv {
                capture.layers.push(LayerCapture {
                    cross_attn: attn.cross,
                    qkv: plan.capture_qkv.then(|| QkvSnapshot { q, k, v, n_txt, n_img, n_subj }),
                });
            }
        }

        let fm = self.final_modulation.forward(temb.view());
        let fm = fm.row(0).to_vec();
        let out = self.head.forward(modulate(&layer_norm(x_img.view()), &fm[0..d], &fm[d..]).view());
        let mut velocity = unpatchify(out.view(), c, h, w, p.patch);
        // skip path: velocity = z_t + F(z_t)
        *velocity.array_mut() += z_t.array();
        Ok((velocity, capture))
    }
}

/// Free-function form of [`Backbone::predict_velocity`].
pub fn predict_velocity(
    model: &Backbone,
    adapter: Option<&Adapter>,
    z_t: &LatentGrid,
    t: usize,
    text: &TokenSeq,
    subject: Option<&LatentGrid>,
    plan: &InterventionPlan,
) -> Result<(LatentGrid, AttentionCapture)> {
    model.predict_velocity(adapter, z_t, t, text, subject, plan)
}
