//! Linear noise schedule, one-step forward diffusion and Euler sampling with the
//! toy backbone.

use shine_lab::backbone::{Backbone, InterventionPlan, ModelParams, TokenSeq};
use shine_lab::scheduler::{euler_step, forward_diffuse, make_schedule, NoiseSource, INIT_STREAM};

fn main() -> shine_lab::Result<()> {
    let schedule = make_schedule(20)?;
    println!("sigmas: {:?}", schedule.descending());

    let mut noise = NoiseSource::new(3, 9);
    let z_clean = noise.next_grid(12, 16, 16);

    // with the exact straight-line velocity, Euler steps retrace the path
    let eps = noise.next_grid(12, 16, 16);
    let v = eps.sub(&z_clean)?;
    let mut z = shine_lab::scheduler::forward_diffuse_with(&z_clean, schedule.sigma(19)?, &eps)?;
    for t in (1..=19).rev() {
        z = euler_step(&z, &v, schedule.sigma(t)?, schedule.sigma(t - 1)?)?;
    }
    println!("exact-velocity recovery error: {:.2e}", z.max_abs_diff(&z_clean)?);

    // the same loop driven by the backbone, starting partway down the schedule
    let model = Backbone::new(ModelParams::default())?;
    let text = TokenSeq::from_prompt("a photo of a dog", 32, 0);
    let mut z = forward_diffuse(&z_clean, schedule.sigma(14)?, &mut NoiseSource::new(3, INIT_STREAM))?;
    for t in (1..=14).rev() {
        let (v, _) = model.predict_velocity(None, &z, t, &text, None, &InterventionPlan::none())?;
        z = euler_step(&z, &v, schedule.sigma(t)?, schedule.sigma(t - 1)?)?;
        println!("t={t:>2} |z| = {:.3}", z.norm());
    }
    Ok(())
}
