use dpt_core::checks::{self, ModelCheckOptions, TOY_PARAM_LIMIT};
use dpt_core::dpt_tensor::GradcheckOptions;
use dpt_core::DptConfig;

#[test]
fn every_primitive_op_passes() {
    let results = checks::primitive_checks(&GradcheckOptions::default()).unwrap();
    assert!(results.len() >= 30);
    for r in &results {
        assert!(r.passed, "{} failed: {:e}", r.name, r.max_rel_err);
        assert!(r.max_rel_err <= 1e-4);
    }
}

#[test]
fn corrupted_backward_is_reported() {
    let r = checks::corrupted_backward_check(&GradcheckOptions::default()).unwrap();
    assert!(!r.passed);
    // masked-out inputs get gradient where the true one is zero
    assert!(r.max_rel_err > 0.5, "{}", r.max_rel_err);
}

#[test]
fn toy_depth_end_to_end() {
    let r = checks::model_check(&DptConfig::toy(), &ModelCheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > 100);
}

#[test]
fn toy_segmentation_with_aux_end_to_end() {
    let cfg = DptConfig::toy_seg();
    assert!(cfg.head.has_aux());
    let r = checks::model_check(&cfg, &ModelCheckOptions::default()).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn hybrid_embedder_gradients() {
    let cfg = DptConfig::toy_hybrid();
    let opts = ModelCheckOptions {
        size: 32,
        ..Default::default()
    };
    let r = checks::hybrid_embedder_check(cfg.hybrid_config().unwrap(), &opts).unwrap();
    assert!(r.passed, "{:?}", r.worst_leaf());
}

#[test]
fn end_to_end_checks_hold_across_seeds() {
    for seed in 1..3 {
        for cfg in [DptConfig::toy(), DptConfig::toy_seg()] {
            let opts = ModelCheckOptions {
                seed,
                ..Default::default()
            };
            let r = checks::model_check(&cfg, &opts).unwrap();
            assert!(r.passed, "{} seed {seed}: {:?}", cfg.name, r.worst_leaf());
        }
    }
}

#[test]
fn guard_refuses_full_size_models() {
    assert!(checks::guard(&DptConfig::toy()).unwrap() <= TOY_PARAM_LIMIT);
    let err = checks::guard(&DptConfig::base()).unwrap_err();
    assert!(err.to_string().contains("limited to"), "{err}");
    assert!(checks::model_check(&DptConfig::large(), &ModelCheckOptions::default()).is_err());
}
