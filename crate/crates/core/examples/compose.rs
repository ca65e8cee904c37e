//! End to end: synthesize inputs, compose, and write the image, mask and report.
//!
//! Usage: cargo run --example compose -- [OUT_DIR] [SEED]

use std::path::PathBuf;

use shine_lab::io::{write_image, write_mask};
use shine_lab::pipeline::{synth_inputs, CompositionConfig, Composer};

fn main() -> shine_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "compose-out".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    std::fs::create_dir_all(&out_dir).map_err(|e| shine_lab::Error::Io { path: out_dir.clone(), source: e })?;

    let inputs = synth_inputs(seed, 32, 16)?;
    let composer = Composer::new(CompositionConfig { seed, ..CompositionConfig::default() })?;
    let (image, report) = composer.compose(&inputs)?;

    write_image(out_dir.join("background.ppm"), &inputs.background)?;
    write_image(out_dir.join("init.ppm"), &inputs.init)?;
    write_image(out_dir.join("subject.ppm"), &inputs.subject)?;
    write_mask(out_dir.join("mask.pgm"), &inputs.mask)?;
    write_image(out_dir.join("composed.ppm"), &image)?;
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json()).map_err(|e| shine_lab::Error::Io { path: report_path, source: e })?;

    println!("prompt: {}", inputs.prompt);
    for step in &report.steps {
        let msa = step.msa.as_ref().map(|m| format!("loss {:.2} -> {:.2}", m.initial(), m.last()));
        let mask = step.mask.as_ref().map(|m| format!("{:?} mask {:.2}", m.source, m.coverage));
        println!(
            "t={:>2} sigma={:.2} {} {}",
            step.t,
            step.sigma,
            msa.unwrap_or_default(),
            mask.unwrap_or_default()
        );
    }
    println!("final checksum {}", report.final_checksum);
    println!("wrote {}", out_dir.display());
    Ok(())
}
