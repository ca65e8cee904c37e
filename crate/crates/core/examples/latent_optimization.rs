//! Anchor-matching optimization of the noisy latent before a denoising step, and the
//! calibration behind the default step-size multiplier.

use ndarray::Array2;
use shine_lab::backbone::{Adapter, AdapterParams, Backbone, ModelParams};
use shine_lab::msa::{calibrate_lr_scale, calibration_instance, run_msa_inner_loop, MsaConfig, DEFAULT_LRS};
use shine_lab::Mask;

fn main() -> shine_lab::Result<()> {
    let params = ModelParams::default();
    let model = Backbone::new(params.clone())?;
    let adapter = Adapter::new(AdapterParams::default(), &params)?;
    let (z, subject, text, t) = calibration_instance();

    let scale = calibrate_lr_scale(&model, &adapter, &z, t, &text, &subject, &DEFAULT_LRS)?;
    println!("calibrated step-size multiplier: {scale:.4e}");

    // optimize only the left half of the latent
    let mask = Mask::new(Array2::from_shape_fn((16, 16), |(_, x)| if x < 8 { 1.0 } else { 0.0 }))?;
    let config = MsaConfig::new(14, 12, mask);
    for step in [14, 13] {
        let (moved, trace) = run_msa_inner_loop(&model, &adapter, &z, step, &text, &subject, &config)?;
        println!("t={step} alpha={:.4} losses:", trace.alpha);
        for (i, l) in trace.losses.iter().enumerate() {
            println!("  {i:>2} {l:.4}");
        }
        println!("  latent moved by {:.4}", moved.sub(&z)?.norm());
    }

    let off = adapter.with_strength(0.0)?;
    let (still, _) = run_msa_inner_loop(&model, &off, &z, 14, &text, &subject, &config)?;
    println!("zero-strength adapter leaves the latent unchanged: {}", still.bitwise_eq(&z));
    Ok(())
}
