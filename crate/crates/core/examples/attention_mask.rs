//! From captured image-to-text attention to a binary subject footprint:
//! normalize, threshold, dilate, keep the largest component.

use shine_lab::abb::{adaptive_mask, attention_mask};
use shine_lab::backbone::{Adapter, AdapterParams, Backbone, InterventionPlan, ModelParams, TokenSeq};
use shine_lab::numerics::BinaryMask;
use shine_lab::scheduler::NoiseSource;
use shine_lab::Mask;

fn show(m: &BinaryMask) {
    let (h, w) = m.shape();
    for y in 0..h {
        let row: String = (0..w).map(|x| if m.get(y, x) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> shine_lab::Result<()> {
    let params = ModelParams::default();
    let model = Backbone::new(params.clone())?;
    let adapter = Adapter::new(AdapterParams::default(), &params)?;
    let mut noise = NoiseSource::new(2, 7);
    let z = noise.next_grid(12, 16, 16);
    let subject = noise.next_grid(12, 8, 8);
    let text = TokenSeq::from_prompt("a painting of a cat", 32, 0);
    let cat = text.find_word("cat");

    let (_, capture) =
        model.predict_velocity(Some(&adapter), &z, 13, &text, Some(&subject), &InterventionPlan::capture())?;
    let map = capture.subject_map(capture.num_layers() - 1, &cat)?;
    println!("subject attention on the token grid:\n{map:.3}");

    for gamma in [0.2, 0.6, 0.9] {
        let mask = attention_mask(&capture, &cat, gamma, 3, capture.num_layers() - 1)?;
        println!("gamma={gamma}: {} of {} latent cells", mask.count(), 16 * 16);
        show(&mask);
    }

    let attn = attention_mask(&capture, &cat, 0.9, 1, capture.num_layers() - 1)?;
    let user = BinaryMask::rect(16, 16, 4, 4, 12, 12).to_mask();
    for t in [13, 12] {
        let m: Mask = adaptive_mask(t, 12, &attn, &user)?;
        println!("t={t}: blend mask coverage {:.3}", m.coverage());
    }
    Ok(())
}
