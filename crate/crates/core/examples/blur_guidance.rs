//! Guidance away from a prediction whose image queries are blurred, and the study of
//! how blurring each Q/K/V group moves the velocity.

use shine_lab::backbone::{Adapter, AdapterParams, Backbone, InterventionPlan, ModelParams, TokenSeq};
use shine_lab::dsg::{dsg_combine, negative_velocity, DsgConfig};
use shine_lab::pipeline::{perturb_study, CompositionConfig};
use shine_lab::scheduler::NoiseSource;

fn main() -> shine_lab::Result<()> {
    let params = ModelParams::default();
    let model = Backbone::new(params.clone())?;
    let adapter = Adapter::new(AdapterParams::default(), &params)?;
    let mut noise = NoiseSource::new(4, 5);
    let z = noise.next_grid(12, 16, 16);
    let subject = noise.next_grid(12, 8, 8);
    let text = TokenSeq::from_prompt("a small toy robot", 32, 0);

    let cfg = DsgConfig::new(14);
    let (v, _) = model.predict_velocity(Some(&adapter), &z, 10, &text, Some(&subject), &InterventionPlan::none())?;
    let v_neg = negative_velocity(&model, Some(&adapter), &z, 10, &text, Some(&subject), cfg.blur_spec())?;
    for eta in [0.0, 0.5, 1.0] {
        let guided = dsg_combine(&v, &v_neg, eta)?;
        println!("eta={eta}: |v_dsg - v| = {:.4}", guided.sub(&v)?.norm());
    }

    let seeds: Vec<u64> = (0..5).collect();
    let table = perturb_study(&CompositionConfig::default(), &seeds, 10.0, "a photo of a dog")?;
    print!("{}", table.render());
    Ok(())
}
