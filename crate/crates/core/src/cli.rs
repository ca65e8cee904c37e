//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::abb::rank_layers_by_iou;
use crate::backbone::{AttentionCapture, BlurTarget};
use crate::error::{Error, Result};
use crate::io::{read_image, read_mask, write_image, write_latent, write_mask};
use crate::numerics::BinaryMask;
use crate::pipeline::{
    equivalence_suite, perturb_study, save_ranking, synth_inputs, CompositionConfig, CompositionInputs, Composer,
    PixelGrid, StepObserver, EQUIVALENCE_TOLERANCE, KEY_BLUR_MARGIN,
};
use crate::tensor::Mask;

#[derive(Debug, Parser)]
#[command(name = "shine-lab", version, about = "Training-free subject composition on a toy flow-matching backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compose a subject into a background; writes the image and a JSON step report.
    Compose(ComposeArgs),
    /// Dump per-layer subject attention heatmaps; rank layers against a ground-truth mask.
    InspectAttn(InspectArgs),
    /// Check that blurring attention weights equals blurring queries.
    CheckEquivalence(EquivalenceArgs),
    /// Blur each Q/K/V group and report how far the velocity moves.
    PerturbStudy(PerturbArgs),
    /// Write seeded toy images, mask, latents and a default config.
    GenAssets(AssetArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bg: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    subject: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also dump the final latent.
    #[arg(long)]
    latent_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Ground-truth subject mask (P5, image resolution) for layer ranking.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Runs with consecutive seeds to average the ranking over.
    #[arg(long, default_value_t = 1)]
    runs: u64,
}

#[derive(Debug, Args)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
    #[arg(long, default_value = "a photo of a dog")]
    prompt: String,
}

#[derive(Debug, Args)]
struct AssetArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 16)]
    subject_size: usize,
}

/// Parses `argv` (program name first), runs the command, and returns the exit status.
pub fn cli_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Compose(a) => compose_cmd(a),
        Command::InspectAttn(a) => inspect_cmd(a),
        Command::CheckEquivalence(a) => equivalence_cmd(a),
        Command::PerturbStudy(a) => perturb_cmd(a),
        Command::GenAssets(a) => assets_cmd(a),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<CompositionConfig> {
    let mut cfg = match path {
        Some(p) => CompositionConfig::load(p)?,
        None => CompositionConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_inputs(a: &InputArgs) -> Result<CompositionInputs> {
    let inputs = CompositionInputs {
        background: read_image(&a.bg)?,
        init: read_image(&a.init)?,
        subject: read_image(&a.subject)?,
        mask: read_mask(&a.mask)?,
        prompt: a.prompt.clone(),
    };
    inputs.validate()?;
    Ok(inputs)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn compose_cmd(a: ComposeArgs) -> Result<i32> {
    let cfg = load_config(a.inputs.config.as_deref(), a.inputs.seed)?;
    let inputs = load_inputs(&a.inputs)?;
    let composer = Composer::new(cfg)?;
    let latents = composer.prepare(&inputs)?;
    let (z0, report) = composer.compose_latents(&latents, &mut crate::pipeline::NoopObserver)?;
    write_image(&a.out, &composer.codec().decode(&z0)?)?;
    if let Some(p) = &a.report {
        write_text(p, &report.to_json())?;
    }
    if let Some(p) = &a.latent_out {
        write_latent(p, &z0)?;
    }
    println!("wrote {} ({} steps, checksum {})", a.out.display(), report.steps.len(), report.final_checksum);
    Ok(0)
}

#[derive(Default)]
struct CaptureLog(Vec<AttentionCapture>);

impl StepObserver for CaptureLog {
    fn on_capture(&mut self, _t: usize, capture: &AttentionCapture) {
        self.0.push(capture.clone());
    }
}

/// Mean subject attention over a run for one block, max-normalized, as a gray image
/// at pixel resolution.
fn heatmap(run: &[AttentionCapture], tokens: &[usize], layer: usize, scale: usize) -> Result<Mask> {
    let mut sum: Option<Array2<f64>> = None;
    for cap in run {
        let m = cap.subject_map(layer, tokens)?;
        sum = Some(match sum {
            Some(s) => s + &m,
            None => m,
        });
    }
    let sum = sum.ok_or_else(|| Error::invalid("no captured steps"))?;
    let max = sum.iter().copied().fold(0.0, f64::max);
    let (gh, gw) = sum.dim();
    Mask::new(Array2::from_shape_fn((gh * scale, gw * scale), |(y, x)| {
        if max > 0.0 {
            sum[(y / scale, x / scale)] / max
        } else {
            0.0
        }
    }))
}

fn inspect_cmd(a: InspectArgs) -> Result<i32> {
    if a.runs == 0 {
        return Err(Error::invalid("--runs must be at least 1"));
    }
    let base = load_config(a.inputs.config.as_deref(), a.inputs.seed)?;
    let inputs = load_inputs(&a.inputs)?;
    create_dir(&a.out_dir)?;
    let mut runs = Vec::new();
    let mut tokens = Vec::new();
    for r in 0..a.runs {
        let cfg = CompositionConfig { seed: base.seed + r, ..base.clone() };
        let composer = Composer::new(cfg)?;
        let latents = composer.prepare(&inputs)?;
        let mut log = CaptureLog::default();
        composer.compose_latents(&latents, &mut log)?;
        tokens = latents.subject_tokens.clone();
        runs.push(log.0);
    }
    let first = &runs[0];
    let scale = first[0].patch * crate::pipeline::CODEC_PATCH;
    for layer in 0..first[0].num_layers() {
        let path = a.out_dir.join(format!("layer{layer}.pgm"));
        write_mask(&path, &heatmap(first, &tokens, layer, scale)?)?;
        println!("wrote {}", path.display());
    }
    if let Some(gt_path) = &a.gt {
        let gt = read_mask(gt_path)?;
        let gt = BinaryMask::downsample_majority(&gt, crate::pipeline::CODEC_PATCH)?;
        let gts = vec![gt; runs.len()];
        let ranking = rank_layers_by_iou(&runs, &gts, &tokens, base.abb_gamma)?;
        println!("layer  mean_iou");
        for (i, s) in ranking.scores.iter().enumerate() {
            let marker = if i == ranking.best { "  <- best" } else { "" };
            println!("{i:>5}  {s:.4}{marker}");
        }
        let path = a.out_dir.join("ranking.json");
        save_ranking(&path, &ranking)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn equivalence_cmd(a: EquivalenceArgs) -> Result<i32> {
    let report = equivalence_suite(a.pairs, a.seed)?;
    let max_q = report.max_query_residual();
    println!("pairs                         {}", report.cases.len());
    println!("max |B(QK^T) - (BQ)K^T|       {max_q:.3e}");
    println!("min |B(QK^T) - Q(BK)^T|       {:.3e}", report.min_key_residual());
    println!(
        "key-blur residual > {KEY_BLUR_MARGIN:e}   {:.1}%",
        100.0 * report.key_separation_rate()
    );
    if report.all_equivalent() {
        println!("ok: all query-blur residuals <= {EQUIVALENCE_TOLERANCE:e}");
        Ok(0)
    } else {
        println!("FAIL: query-blur residual above {EQUIVALENCE_TOLERANCE:e}");
        Ok(1)
    }
}

fn perturb_cmd(a: PerturbArgs) -> Result<i32> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let table = perturb_study(&cfg, &seeds, a.sigma, &a.prompt)?;
    print!("{}", table.render());
    let n = table.count_less(BlurTarget::QTxt, BlurTarget::QImg);
    println!("Q_txt < Q_img on {n}/{} seeds", seeds.len());
    Ok(0)
}

fn weights_manifest(composer: &Composer) -> serde_json::Value {
    let digest = |a: &Array2<f64>| {
        let mut h = Sha256::new();
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    };
    let mut tensors = serde_json::Map::new();
    for (name, w) in composer.model().named_weights() {
        tensors.insert(name, serde_json::json!({ "shape": w.shape(), "sha256": digest(w) }));
    }
    tensors.insert(
        "codec.mix".into(),
        serde_json::json!({ "shape": composer.codec().mix().shape(), "sha256": digest(composer.codec().mix()) }),
    );
    serde_json::Value::Object(tensors)
}

fn assets_cmd(a: AssetArgs) -> Result<i32> {
    let inputs = synth_inputs(a.seed, a.size, a.subject_size)?;
    create_dir(&a.out_dir)?;
    let d = &a.out_dir;
    let images: [(&str, &PixelGrid); 3] =
        [("bg.ppm", &inputs.background), ("init.ppm", &inputs.init), ("subject.ppm", &inputs.subject)];
    for (name, img) in images {
        write_image(d.join(name), img)?;
    }
    write_mask(d.join("mask.pgm"), &inputs.mask)?;
    write_text(&d.join("prompt.txt"), &format!("{}\n", inputs.prompt))?;

    let cfg = CompositionConfig { seed: a.seed, ..CompositionConfig::default() };
    write_text(&d.join("config.txt"), &cfg.to_config_string())?;
    let composer = Composer::new(cfg)?;
    let latents = composer.prepare(&inputs)?;
    write_latent(d.join("bg.lat"), &latents.background)?;
    write_latent(d.join("init.lat"), &latents.init)?;
    write_latent(d.join("subject.lat"), &latents.subject)?;
    let manifest = serde_json::to_string_pretty(&weights_manifest(&composer)).expect("manifest serializes");
    write_text(&d.join("weights.json"), &manifest)?;
    println!("wrote assets to {} (prompt: \"{}\")", d.display(), inputs.prompt);
    Ok(0)
}
