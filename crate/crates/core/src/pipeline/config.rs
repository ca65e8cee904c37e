use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::abb::{AbbConfig, LayerRanking, LayerSelect, DEFAULT_DILATION, DEFAULT_GAMMA};
use crate::backbone::{AdapterParams, BlurAxis, ModelParams, TokenSeq};
use crate::dsg::{DsgConfig, DEFAULT_BLUR_SIGMA, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::msa::{MsaConfig, DEFAULT_ITERS, DEFAULT_LRS, DEFAULT_LR_SCALE};
use crate::numerics::{Connectivity, Padding};
use crate::pipeline::codec::{CODEC_PATCH, PIXEL_CHANNELS};
use crate::tensor::Mask;

/// Everything a composition run needs besides its inputs.
///
/// Defaults follow the reference adapter setup: 20 steps, start at 14, switch masks
/// at 12, 10 inner iterations, guidance 0.5 with blur 10, threshold 0.2, dilation 3.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionConfig {
    pub steps: usize,
    pub start_step: usize,
    pub tau: usize,

    /// Seed of the initialization noise.
    pub seed: u64,
    /// Seed of the per-step background noise; `seed` when unset.
    pub background_seed: Option<u64>,
    pub text_seed: u64,
    pub codec_seed: u64,
    pub model: ModelParams,
    pub adapter: AdapterParams,

    pub msa_lrs: Vec<f64>,
    pub msa_lr_scale: f64,
    pub msa_iters: usize,

    pub dsg_eta: f64,
    pub dsg_blur_sigma: f64,
    pub dsg_blur_axis: BlurAxis,
    pub dsg_padding: Padding,
    /// `start_step` when unset.
    pub dsg_high: Option<usize>,
    pub dsg_low: usize,

    pub abb_gamma: f64,
    pub abb_dilation: usize,
    pub abb_layer: LayerSelect,
    /// Where an `iou-best` ranking was loaded from.
    pub abb_ranking: Option<PathBuf>,
    pub abb_connectivity: Connectivity,
    /// `start_step` when unset.
    pub abb_blend_high: Option<usize>,
    pub abb_blend_low: usize,

    /// Explicit subject token indices; otherwise `subject_word`, otherwise the last word.
    pub subject_tokens: Option<Vec<usize>>,
    pub subject_word: Option<String>,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            start_step: 14,
            tau: 12,
            seed: 0,
            background_seed: None,
            text_seed: 0,
            codec_seed: 0,
            model: ModelParams {
                latent_channels: PIXEL_CHANNELS * CODEC_PATCH * CODEC_PATCH,
                ..ModelParams::default()
            },
            adapter: AdapterParams::default(),
            msa_lrs: DEFAULT_LRS.to_vec(),
            msa_lr_scale: DEFAULT_LR_SCALE,
            msa_iters: DEFAULT_ITERS,
            dsg_eta: DEFAULT_ETA,
            dsg_blur_sigma: DEFAULT_BLUR_SIGMA,
            dsg_blur_axis: BlurAxis::Token1d,
            dsg_padding: Padding::Replicate,
            dsg_high: None,
            dsg_low: 0,
            abb_gamma: DEFAULT_GAMMA,
            abb_dilation: DEFAULT_DILATION,
            abb_layer: LayerSelect::Last,
            abb_ranking: None,
            abb_connectivity: Connectivity::Eight,
            abb_blend_high: None,
            abb_blend_low: 1,
            subject_tokens: None,
            subject_word: None,
        }
    }
}

const KEYS: &[&str] = &[
    "steps",
    "start_step",
    "tau",
    "seed",
    "background_seed",
    "text_seed",
    "codec_seed",
    "model_seed",
    "model_layers",
    "model_dim",
    "model_heads",
    "model_patch",
    "adapter_seed",
    "adapter_strength",
    "msa_lrs",
    "msa_lr_scale",
    "msa_iters",
    "dsg_eta",
    "dsg_blur_sigma",
    "dsg_blur_axis",
    "dsg_padding",
    "dsg_high",
    "dsg_low",
    "abb_gamma",
    "abb_dilation",
    "abb_layer",
    "abb_ranking",
    "abb_connectivity",
    "abb_blend_high",
    "abb_blend_low",
    "subject_tokens",
    "subject_word",
];

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config { line, msg: format!("`{key}`: cannot parse `{v}`") })
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(line, key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl CompositionConfig {
    /// Parses flat `key = value` text. `#` starts a comment; unknown keys are errors.
    /// A relative `abb_ranking` path is resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut layer_is_iou = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let (key, v) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config { line, msg: format!("unknown key `{key}`") });
            }
            let wrap = |e: Error| Error::Config { line, msg: format!("`{key}`: {e}") };
            match key {
                "steps" => cfg.steps = parse_num(line, key, v)?,
                "start_step" => cfg.start_step = parse_num(line, key, v)?,
                "tau" => cfg.tau = parse_num(line, key, v)?,
                "seed" => cfg.seed = parse_num(line, key, v)?,
                "background_seed" => cfg.background_seed = Some(parse_num(line, key, v)?),
                "text_seed" => cfg.text_seed = parse_num(line, key, v)?,
                "codec_seed" => cfg.codec_seed = parse_num(line, key, v)?,
                "model_seed" => cfg.model.seed = parse_num(line, key, v)?,
                "model_layers" => cfg.model.layers = parse_num(line, key, v)?,
                "model_dim" => cfg.model.dim = parse_num(line, key, v)?,
                "model_heads" => cfg.model.heads = parse_num(line, key, v)?,
                "model_patch" => cfg.model.patch = parse_num(line, key, v)?,
                "adapter_seed" => cfg.adapter.seed = parse_num(line, key, v)?,
                "adapter_strength" => cfg.adapter.strength = parse_num(line, key, v)?,
                "msa_lrs" => cfg.msa_lrs = parse_list(line, key, v)?,
                "msa_lr_scale" => cfg.msa_lr_scale = parse_num(line, key, v)?,
                "msa_iters" => cfg.msa_iters = parse_num(line, key, v)?,
                "dsg_eta" => cfg.dsg_eta = parse_num(line, key, v)?,
                "dsg_blur_sigma" => cfg.dsg_blur_sigma = parse_num(line, key, v)?,
                "dsg_blur_axis" => cfg.dsg_blur_axis = v.parse().map_err(wrap)?,
                "dsg_padding" => cfg.dsg_padding = v.parse().map_err(wrap)?,
                "dsg_high" => cfg.dsg_high = Some(parse_num(line, key, v)?),
                "dsg_low" => cfg.dsg_low = parse_num(line, key, v)?,
                "abb_gamma" => cfg.abb_gamma = parse_num(line, key, v)?,
                "abb_dilation" => cfg.abb_dilation = parse_num(line, key, v)?,
                "abb_layer" => match v {
                    "last" => cfg.abb_layer = LayerSelect::Last,
                    "iou-best" => layer_is_iou = Some(line),
                    n => cfg.abb_layer = LayerSelect::Fixed(parse_num(line, key, n)?),
                },
                "abb_ranking" => {
                    let p = PathBuf::from(v);
                    cfg.abb_ranking = Some(match base_dir {
                        Some(dir) if p.is_relative() => dir.join(p),
                        _ => p,
                    });
                }
                "abb_connectivity" => {
                    cfg.abb_connectivity = match v {
                        "4" => Connectivity::Four,
                        "8" => Connectivity::Eight,
                        _ => return Err(Error::Config { line, msg: format!("connectivity must be 4 or 8, got `{v}`") }),
                    }
                }
                "abb_blend_high" => cfg.abb_blend_high = Some(parse_num(line, key, v)?),
                "abb_blend_low" => cfg.abb_blend_low = parse_num(line, key, v)?,
                "subject_tokens" => cfg.subject_tokens = Some(parse_list(line, key, v)?),
                "subject_word" => cfg.subject_word = Some(v.to_lowercase()),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if let Some(line) = layer_is_iou {
            let path = cfg
                .abb_ranking
                .clone()
                .ok_or_else(|| Error::Config { line, msg: "`abb_layer = iou-best` needs `abb_ranking`".into() })?;
            cfg.abb_layer = LayerSelect::IouBest(load_ranking(&path)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// The config in the file syntax accepted by [`CompositionConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("steps", self.steps.to_string());
        put("start_step", self.start_step.to_string());
        put("tau", self.tau.to_string());
        put("seed", self.seed.to_string());
        if let Some(b) = self.background_seed {
            put("background_seed", b.to_string());
        }
        put("text_seed", self.text_seed.to_string());
        put("codec_seed", self.codec_seed.to_string());
        put("model_seed", self.model.seed.to_string());
        put("model_layers", self.model.layers.to_string());
        put("model_dim", self.model.dim.to_string());
        put("model_heads", self.model.heads.to_string());
        put("model_patch", self.model.patch.to_string());
        put("adapter_seed", self.adapter.seed.to_string());
        put("adapter_strength", self.adapter.strength.to_string());
        put("msa_lrs", join(&self.msa_lrs));
        put("msa_lr_scale", self.msa_lr_scale.to_string());
        put("msa_iters", self.msa_iters.to_string());
        put("dsg_eta", self.dsg_eta.to_string());
        put("dsg_blur_sigma", self.dsg_blur_sigma.to_string());
        put(
            "dsg_blur_axis",
            match self.dsg_blur_axis {
                BlurAxis::Token1d => "token-1d",
                BlurAxis::Spatial2d => "spatial-2d",
            }
            .into(),
        );
        put(
            "dsg_padding",
            match self.dsg_padding {
                Padding::Zero => "zero",
                Padding::Replicate => "replicate",
            }
            .into(),
        );
        if let Some(h) = self.dsg_high {
            put("dsg_high", h.to_string());
        }
        put("dsg_low", self.dsg_low.to_string());
        put("abb_gamma", self.abb_gamma.to_string());
        put("abb_dilation", self.abb_dilation.to_string());
        put(
            "abb_layer",
            match &self.abb_layer {
                LayerSelect::Last => "last".into(),
                LayerSelect::Fixed(i) => i.to_string(),
                LayerSelect::IouBest(_) => "iou-best".into(),
            },
        );
        if let Some(p) = &self.abb_ranking {
            put("abb_ranking", p.display().to_string());
        }
        put(
            "abb_connectivity",
            match self.abb_connectivity {
                Connectivity::Four => "4",
                Connectivity::Eight => "8",
            }
            .into(),
        );
        if let Some(h) = self.abb_blend_high {
            put("abb_blend_high", h.to_string());
        }
        put("abb_blend_low", self.abb_blend_low.to_string());
        if let Some(t) = &self.subject_tokens {
            put("subject_tokens", join(t));
        }
        if let Some(w) = &self.subject_word {
            put("subject_word", w.clone());
        }
        s
    }

    pub fn background_seed(&self) -> u64 {
        self.background_seed.unwrap_or(self.seed)
    }

    pub fn msa_config(&self, mask: Mask) -> MsaConfig {
        MsaConfig {
            lrs: self.msa_lrs.clone(),
            lr_scale: self.msa_lr_scale,
            iters: self.msa_iters,
            ..MsaConfig::new(self.start_step, self.tau, mask)
        }
    }

    pub fn dsg_config(&self) -> DsgConfig {
        DsgConfig {
            eta: self.dsg_eta,
            blur_sigma: self.dsg_blur_sigma,
            blur_axis: self.dsg_blur_axis,
            padding: self.dsg_padding,
            active_high: self.dsg_high.unwrap_or(self.start_step),
            active_low: self.dsg_low,
        }
    }

    pub fn abb_config(&self, user_mask: Mask, subject_tokens: Vec<usize>) -> AbbConfig {
        AbbConfig {
            gamma: self.abb_gamma,
            dilation: self.abb_dilation,
            layer: self.abb_layer.clone(),
            connectivity: self.abb_connectivity,
            blend_high: self.abb_blend_high.unwrap_or(self.start_step),
            blend_low: self.abb_blend_low,
            ..AbbConfig::new(self.start_step, self.tau, user_mask, subject_tokens)
        }
    }

    /// Text-token indices of the subject within `text`.
    pub fn resolve_subject_tokens(&self, text: &TokenSeq) -> Result<Vec<usize>> {
        if let Some(idx) = &self.subject_tokens {
            if idx.is_empty() || idx.iter().any(|i| *i >= text.len()) {
                return Err(Error::invalid(format!(
                    "subject tokens {idx:?} out of range for {} text tokens",
                    text.len()
                )));
            }
            return Ok(idx.clone());
        }
        if let Some(word) = &self.subject_word {
            let found = text.find_word(word);
            if found.is_empty() {
                return Err(Error::invalid(format!("subject word `{word}` is not in the prompt")));
            }
            return Ok(found);
        }
        Ok(vec![text.len() - 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_step >= self.steps {
            return Err(Error::invalid(format!(
                "start step {} must be below the {} schedule steps",
                self.start_step, self.steps
            )));
        }
        self.model.validate()?;
        if self.model.latent_channels != PIXEL_CHANNELS * CODEC_PATCH * CODEC_PATCH {
            return Err(Error::invalid("model latent channels must match the codec"));
        }
        if !self.adapter.strength.is_finite() || self.adapter.strength < 0.0 {
            return Err(Error::invalid("adapter strength must be finite and non-negative"));
        }
        let dummy = Mask::ones(1, 1);
        self.msa_config(dummy.clone()).validate()?;
        self.dsg_config().validate()?;
        self.abb_config(dummy, vec![0]).validate()?;
        self.abb_layer.resolve(self.model.layers)?;
        Ok(())
    }
}

pub fn load_ranking(path: &Path) -> Result<LayerRanking> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn save_ranking(path: &Path, ranking: &LayerRanking) -> Result<()> {
    let text = serde_json::to_string_pretty(ranking).expect("ranking serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let cfg = CompositionConfig::default();
        assert_eq!(CompositionConfig::parse(&cfg.to_config_string(), None).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = CompositionConfig::parse("# header\n\nseed = 7 # trailing\nmsa_lrs = 1, 2,3\n", None).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.msa_lrs, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn unknown_key_names_line() {
        match CompositionConfig::parse("seed = 1\nbogus = 2\n", None) {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariants_enforced() {
        assert!(CompositionConfig::parse("start_step = 20", None).is_err());
        assert!(CompositionConfig::parse("msa_iters = 0", None).is_err());
        assert!(CompositionConfig::parse("abb_dilation = 2", None).is_err());
        assert!(CompositionConfig::parse("abb_layer = 9", None).is_err());
        assert!(CompositionConfig::parse("abb_layer = iou-best", None).is_err());
        assert!(CompositionConfig::parse("seed", None).is_err());
    }

    #[test]
    fn subject_resolution() {
        let text = TokenSeq::from_prompt("a red dog on grass", 32, 0);
        let mut cfg = CompositionConfig::default();
        assert_eq!(cfg.resolve_subject_tokens(&text).unwrap(), vec![4]);
        cfg.subject_word = Some("dog".into());
        assert_eq!(cfg.resolve_subject_tokens(&text).unwrap(), vec![2]);
        cfg.subject_tokens = Some(vec![1, 2]);
        assert_eq!(cfg.resolve_subject_tokens(&text).unwrap(), vec![1, 2]);
        cfg.subject_tokens = Some(vec![9]);
        assert!(cfg.resolve_subject_tokens(&text).is_err());
    }
}
