mod common;

use ndarray::Array2;

use common::msa_instance;
use shine_lab::msa::{
    calibrate_lr_scale, calibration_instance, run_msa_inner_loop, MsaConfig, MsaInnerLoop, DEFAULT_LRS,
    DEFAULT_LR_SCALE,
};
use shine_lab::backbone::{Adapter, AdapterParams, Backbone, ModelParams};
use shine_lab::{Error, Mask};

#[test]
fn default_scale_matches_calibration() {
    let params = ModelParams::default();
    let model = Backbone::new(params.clone()).unwrap();
    let adapter = Adapter::new(AdapterParams::default(), &params).unwrap();
    let (z, subject, text, t) = calibration_instance();
    let scale = calibrate_lr_scale(&model, &adapter, &z, t, &text, &subject, &DEFAULT_LRS).unwrap();
    // the constant is the calibrated value rounded down to two significant figures
    assert!(DEFAULT_LR_SCALE <= scale && scale < DEFAULT_LR_SCALE * 1.1, "calibrated {scale:e}");
}

#[test]
fn jacobian_free_gradient_is_a_descent_direction() {
    let aligned = (0..6).filter(|s| msa_instance(*s).fd_alignment(1e-4) > 0.0).count();
    assert!(aligned >= 5, "{aligned}/6");
}

#[test]
fn loop_reduces_loss_with_default_rates() {
    let inst = msa_instance(21);
    let cfg = MsaConfig::new(14, 12, Mask::ones(16, 16));
    let (_, trace) = run_msa_inner_loop(&inst.model, &inst.adapter, &inst.z, 14, &inst.text, &inst.subject, &cfg)
        .unwrap();
    assert_eq!(trace.losses.len(), cfg.iters + 1);
    assert!(trace.last() < trace.initial(), "{:?}", trace.losses);
    assert_eq!(trace.alpha, 500.0 * DEFAULT_LR_SCALE);
}

#[test]
fn cells_outside_the_mask_never_move() {
    let inst = msa_instance(22);
    let mask = Mask::new(Array2::from_shape_fn((16, 16), |(y, x)| if (4..10).contains(&y) && x > 7 { 1.0 } else { 0.0 }))
        .unwrap();
    let cfg = MsaConfig::new(14, 12, mask.clone());
    let (moved, _) = run_msa_inner_loop(&inst.model, &inst.adapter, &inst.z, 14, &inst.text, &inst.subject, &cfg)
        .unwrap();
    let mut changed_inside = false;
    for ((c, y, x), v) in moved.array().indexed_iter() {
        let orig = inst.z.array()[(c, y, x)];
        if mask.get(y, x) == 0.0 {
            assert_eq!(v.to_bits(), orig.to_bits());
        } else if *v != orig {
            changed_inside = true;
        }
    }
    assert!(changed_inside);
}

#[test]
fn anchor_survives_the_loop_unchanged() {
    let inst = msa_instance(23);
    let mask = Mask::ones(16, 16);
    let mut inner =
        MsaInnerLoop::new(&inst.model, &inst.adapter, inst.z.clone(), 14, &inst.text, &inst.subject, 0.2, &mask)
            .unwrap();
    let before = inner.compute_anchor().unwrap().velocity().clone();
    for _ in 0..3 {
        inner.iterate().unwrap();
    }
    let after = inner.anchor().unwrap();
    assert!(after.is_frozen());
    assert!(after.velocity().bitwise_eq(&before));
    assert!(matches!(inner.compute_anchor(), Err(Error::Contract(_))));
}

#[test]
fn iterating_without_anchor_is_a_contract_error() {
    let inst = msa_instance(24);
    let mask = Mask::ones(16, 16);
    let mut inner =
        MsaInnerLoop::new(&inst.model, &inst.adapter, inst.z.clone(), 14, &inst.text, &inst.subject, 0.2, &mask)
            .unwrap();
    assert!(matches!(inner.iterate(), Err(Error::Contract(_))));
}

#[test]
fn zero_iterations_rejected() {
    let inst = msa_instance(25);
    let cfg = MsaConfig { iters: 0, ..MsaConfig::new(14, 12, Mask::ones(16, 16)) };
    assert!(run_msa_inner_loop(&inst.model, &inst.adapter, &inst.z, 14, &inst.text, &inst.subject, &cfg).is_err());
}
