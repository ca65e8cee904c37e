use ndarray::Array3;

use shine_lab::abb::MaskSource;
use shine_lab::backbone::{Backbone, InterventionPlan, TokenSeq};
use shine_lab::pipeline::{
    synth_inputs, BlendEvent, CompositionConfig, Composer, LatentCodec, LatentInputs, NoopObserver, PixelGrid,
    StepObserver,
};
use shine_lab::scheduler::{euler_step, forward_diffuse, make_schedule, NoiseSource, INIT_STREAM};
use shine_lab::{Error, Mask};

fn pixels(seed: u64, c: usize, h: usize, w: usize) -> PixelGrid {
    let z = NoiseSource::new(seed, 60).next_grid(c, h, w);
    PixelGrid::new(z.into_array())
}

#[test]
fn codec_is_an_orthogonal_linear_map() {
    let codec = LatentCodec::new(4, 3, 2).unwrap();
    let a = pixels(1, 3, 8, 10);
    let b = pixels(2, 3, 8, 10);
    let za = codec.encode(&a).unwrap();
    assert_eq!(za.shape(), (12, 4, 5));
    let back = codec.decode(&za).unwrap();
    let err = (back.values() - a.values()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err <= 1e-9);
    // norm preserved
    let na = a.values().iter().map(|v| v * v).sum::<f64>();
    assert!((za.norm_sq() - na).abs() < 1e-9 * na);

    let sum = PixelGrid::new(a.values() + b.values());
    let lhs = codec.encode(&sum).unwrap();
    let rhs = za.add(&codec.encode(&b).unwrap()).unwrap();
    assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-9);

    let zero = codec.encode(&PixelGrid::new(Array3::zeros((3, 4, 4)))).unwrap();
    assert!(zero.array().iter().all(|v| *v == 0.0));
}

#[test]
fn report_has_one_record_per_step() {
    let inputs = synth_inputs(3, 32, 16).unwrap();
    let composer = Composer::new(CompositionConfig::default()).unwrap();
    let (_, report) = composer.compose(&inputs).unwrap();
    let ts: Vec<usize> = report.steps.iter().map(|s| s.t).collect();
    assert_eq!(ts, (0..=14).rev().collect::<Vec<_>>());
    for s in &report.steps {
        assert_eq!(s.msa.is_some(), s.t > 12, "t={}", s.t);
        assert_eq!(s.mask.is_some(), s.t >= 1);
        assert_eq!(s.dsg.is_some(), s.t >= 1);
        assert_eq!(s.sigma, s.t as f64 / 20.0);
    }
    let last = report.steps.last().unwrap();
    assert_eq!(last.latent_checksum, report.final_checksum);
    assert_eq!(report.steps[report.steps.len() - 2].latent_checksum, report.final_checksum);
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["steps"].as_array().unwrap().len(), 15);
    assert_eq!(json["steps"][0]["mask"]["source"], "attention");
    assert_eq!(json["steps"][2]["mask"]["source"], "user");
}

#[test]
fn neutralized_run_is_a_plain_denoise() {
    let cfg = CompositionConfig {
        seed: 9,
        adapter: shine_lab::backbone::AdapterParams { strength: 0.0, ..Default::default() },
        dsg_eta: 0.0,
        // blend only while the (all-ones) user mask is active
        abb_blend_high: Some(12),
        ..CompositionConfig::default()
    };
    let composer = Composer::new(cfg.clone()).unwrap();
    let mut noise = NoiseSource::new(5, 61);
    let bg = noise.next_grid(12, 8, 8);
    let text = TokenSeq::from_prompt("a dog", 32, 0);
    let inputs = LatentInputs {
        background: bg.clone(),
        init: bg.clone(),
        subject: noise.next_grid(12, 4, 4),
        user_mask: Mask::ones(8, 8),
        text: text.clone(),
        subject_tokens: vec![1],
    };
    let (got, _) = composer.compose_latents(&inputs, &mut NoopObserver).unwrap();

    let model = Backbone::new(cfg.model.clone()).unwrap();
    let sched = make_schedule(20).unwrap();
    let mut z = forward_diffuse(&bg, sched.sigma(14).unwrap(), &mut NoiseSource::new(9, INIT_STREAM)).unwrap();
    for t in (1..=14).rev() {
        let (v, _) = model.predict_velocity(None, &z, t, &text, None, &InterventionPlan::none()).unwrap();
        z = euler_step(&z, &v, sched.sigma(t).unwrap(), sched.sigma(t - 1).unwrap()).unwrap();
    }
    assert!(got.bitwise_eq(&z));
}

#[test]
fn background_seed_does_not_touch_the_first_optimization() {
    let inputs = synth_inputs(4, 32, 16).unwrap();
    let run = |bg_seed| {
        let cfg = CompositionConfig { seed: 2, background_seed: Some(bg_seed), ..CompositionConfig::default() };
        Composer::new(cfg).unwrap().compose(&inputs).unwrap().1
    };
    let (a, b) = (run(100), run(200));
    assert_eq!(a.steps[0].msa, b.steps[0].msa);
    assert_ne!(a.final_checksum, b.final_checksum);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let inputs = synth_inputs(5, 32, 16).unwrap();
    let cfg = CompositionConfig { seed: 11, ..CompositionConfig::default() };
    let (img_a, rep_a) = Composer::new(cfg.clone()).unwrap().compose(&inputs).unwrap();
    let (img_b, rep_b) = Composer::new(cfg).unwrap().compose(&inputs).unwrap();
    assert_eq!(img_a.to_bytes(), img_b.to_bytes());
    assert_eq!(rep_a.to_json(), rep_b.to_json());
}

#[derive(Default)]
struct Sources(Vec<(usize, MaskSource)>);

impl StepObserver for Sources {
    fn on_blend(&mut self, e: &BlendEvent<'_>) {
        self.0.push((e.t, e.source));
    }
}

#[test]
fn observer_sees_every_blend() {
    let inputs = synth_inputs(6, 32, 16).unwrap();
    let composer = Composer::new(CompositionConfig::default()).unwrap();
    let mut seen = Sources::default();
    composer.compose_observed(&inputs, &mut seen).unwrap();
    let want: Vec<(usize, MaskSource)> = (1..=14)
        .rev()
        .map(|t| (t, if t > 12 { MaskSource::Attention } else { MaskSource::User }))
        .collect();
    assert_eq!(seen.0, want);
}

#[test]
fn step_failures_carry_the_step() {
    let mut inputs = synth_inputs(7, 32, 16).unwrap();
    // 6×6 pixels encode to a 3×3 latent, which does not tile into 2×2 tokens
    inputs.subject = pixels(3, 3, 6, 6);
    let err = Composer::new(CompositionConfig::default()).unwrap().compose(&inputs).unwrap_err();
    match err {
        Error::Step { t, .. } => assert_eq!(t, 14),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let mut inputs = synth_inputs(8, 32, 16).unwrap();
    inputs.mask = Mask::ones(16, 32);
    assert!(Composer::new(CompositionConfig::default()).unwrap().compose(&inputs).is_err());
    let mut inputs = synth_inputs(8, 32, 16).unwrap();
    inputs.init = pixels(1, 3, 32, 28);
    assert!(Composer::new(CompositionConfig::default()).unwrap().compose(&inputs).is_err());
}

#[test]
fn defaults_match_the_reference_setup() {
    let c = CompositionConfig::default();
    assert_eq!((c.steps, c.start_step, c.tau, c.msa_iters), (20, 14, 12, 10));
    assert_eq!((c.dsg_eta, c.dsg_blur_sigma, c.abb_gamma, c.abb_dilation), (0.5, 10.0, 0.2, 3));
    assert_eq!(c.msa_lrs, vec![500.0, 750.0, 1000.0]);
    assert_eq!(c.dsg_config().active_high, 14);
    assert_eq!(c.dsg_config().active_low, 0);
}
