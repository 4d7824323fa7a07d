use dpt_core::train::{self, OverfitOptions};
use dpt_core::{Dpt, DptConfig, Mode, Tape};

#[test]
fn toy_model_overfits_one_sample() {
    let report = train::overfit::<f32>(DptConfig::toy(), &OverfitOptions::default()).unwrap();
    let step = report.reached_at.expect("loss never fell below 1e-3");
    assert!(step < 500);
    assert!(report.final_loss < 1e-3);
    assert!(report.losses[0] > 10.0 * report.final_loss);
}

#[test]
fn synthetic_target_is_smooth_and_positive() {
    let (image, target, mask) = train::synthetic_depth_sample::<f64>(32);
    assert_eq!(image.shape(), &[3, 32, 32]);
    assert!(target.data().iter().all(|&v| (0.25..=0.95).contains(&v)));
    // Only the one-pixel border is masked out.
    assert_eq!(mask.iter().filter(|&&m| m).count(), 30 * 30);
}

#[test]
fn single_step_lowers_the_loss() {
    let mut model = Dpt::<f64>::new(DptConfig::toy(), 0).unwrap();
    let (image, target, mask) = train::synthetic_depth_sample::<f64>(64);
    let first = train::sgd_step(&mut model, &image, &target, &mask, 1e-3, Some(1.0), 0).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Train, 1);
    let out = model.forward(&ctx, &tape.constant(image.clone())).unwrap();
    let after = dpt_core::model::depth_loss(&tape, &out, &target, &mask).unwrap().value().item().unwrap();
    assert!(after < first, "{after} >= {first}");
}

#[test]
fn segmentation_models_are_refused() {
    assert!(train::overfit::<f32>(DptConfig::toy_seg(), &OverfitOptions::default()).is_err());
}
