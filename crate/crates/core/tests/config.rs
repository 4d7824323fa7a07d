use dpt_core::config::PRESETS;
use dpt_core::encoder;
use dpt_core::{count_parameters, DptConfig, DptError, Head, Hook, Plan};

fn within(count: usize, published_millions: f64, tol: f64) -> bool {
    let m = count as f64 / 1e6;
    (m - published_millions).abs() <= tol * published_millions
}

#[test]
fn large_preset() {
    let cfg = DptConfig::parse("large").unwrap();
    assert_eq!((cfg.embed_dim, cfg.layers, cfg.heads), (1024, 24, 16));
    assert_eq!(cfg.hooks, [5, 12, 18, 24].map(Hook::Layer).to_vec());
    assert_eq!(cfg.features, 256);
}

#[test]
fn base_preset() {
    let cfg = DptConfig::parse("base").unwrap();
    assert_eq!((cfg.embed_dim, cfg.layers, cfg.patch_size), (768, 12, 16));
    assert_eq!(cfg.hooks, [3, 6, 9, 12].map(Hook::Layer).to_vec());
}

#[test]
fn every_preset_parses_and_validates() {
    for name in PRESETS {
        let cfg = DptConfig::parse(name).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.hooks.len(), 4);
        assert_eq!(cfg.scales, vec![4, 8, 16, 32]);
    }
    assert!(matches!(DptConfig::parse("huge"), Err(DptError::Config(_))));
}

#[test]
fn json_round_trip_is_identity() {
    for name in PRESETS {
        let cfg = DptConfig::preset(name).unwrap();
        let back = DptConfig::parse(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }
}

#[test]
fn rejects_wrong_hook_or_scale_counts() {
    let mut cfg = DptConfig::toy();
    cfg.hooks.pop();
    assert!(matches!(cfg.validate(), Err(DptError::Config(_))));

    let mut cfg = DptConfig::toy();
    cfg.scales = vec![4, 8, 16, 32, 32];
    assert!(cfg.validate().is_err());

    let doc = DptConfig::toy().to_json().replace("\"scales\": [\n    4,\n    8,", "\"scales\": [\n    8,");
    assert!(DptConfig::from_json(&doc).is_err());
}

#[test]
fn rejects_invalid_fields() {
    let bad = [
        DptConfig { heads: 5, ..DptConfig::toy() },
        DptConfig { image_size: 100, ..DptConfig::toy() },
        DptConfig { hooks: [1, 2, 3, 9].map(Hook::Layer).to_vec(), ..DptConfig::toy() },
        DptConfig { hooks: [2, 1, 3, 4].map(Hook::Layer).to_vec(), ..DptConfig::toy() },
        DptConfig { head: Head::segmentation(0), ..DptConfig::toy() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(DptError::Config(_))), "{cfg:?}");
    }
    assert!(DptConfig::from_json(r#"{"name": "x", "unknown_field": 1}"#).is_err());
    assert!(DptConfig::from_json("{ not json").is_err());
}

#[test]
fn input_must_be_divisible_by_32() {
    let cfg = DptConfig::toy();
    let err = cfg.check_input(100, 100).unwrap_err().to_string();
    assert!(err.contains("not divisible by 32"), "{err}");
    for s in [32, 64, 384, 416, 480] {
        cfg.check_input(s, s).unwrap();
    }
    cfg.check_input(64, 96).unwrap();
}

#[test]
fn linear_four_to_two_has_ten_parameters() {
    let mut plan = Plan::new();
    plan.linear("fc", 4, 2, true);
    assert_eq!(plan.num_learnable(), 10);
}

#[test]
fn one_transformer_layer_of_width_8() {
    // qkv 3D^2 + 3D, proj D^2 + D, mlp 8D^2 + 5D, two layer norms 2 * 2D.
    let d: usize = 8;
    let expected = 3 * d * d + 3 * d + d * d + d + 8 * d * d + 5 * d + 4 * d;
    let mut plan = Plan::new();
    encoder::plan_layer(&mut plan, "l", d, 4);
    assert_eq!(plan.num_learnable(), expected);
    assert_eq!(expected, 12 * 64 + 13 * 8);
}

#[test]
fn large_count_matches_published_343m() {
    let n = count_parameters(&DptConfig::large());
    assert!(within(n, 343.0, 0.05), "{n}");
}

#[test]
fn base_count_matches_published_112m() {
    let n = count_parameters(&DptConfig::base());
    assert!(within(n, 112.0, 0.05), "{n}");
}

#[test]
fn hybrid_count_matches_published_123m() {
    let n = count_parameters(&DptConfig::hybrid());
    assert!(within(n, 123.0, 0.05), "{n}");
}

#[test]
fn count_is_independent_of_input_resolution() {
    let cfg = DptConfig::toy();
    let at = |h: usize, w: usize| dpt_core::shapes::describe(&cfg, h, w).unwrap().total_params;
    assert_eq!(at(64, 64), at(384, 384));
    assert_eq!(at(64, 64), at(128, 480));
    assert_eq!(at(64, 64), count_parameters(&cfg));
}

#[test]
fn toy_presets_stay_under_the_gradcheck_guard() {
    for cfg in [DptConfig::toy(), DptConfig::toy_seg(), DptConfig::toy_hybrid()] {
        assert!(count_parameters(&cfg) <= dpt_core::checks::TOY_PARAM_LIMIT);
        dpt_core::checks::guard(&cfg).unwrap();
    }
    assert!(dpt_core::checks::guard(&DptConfig::base()).is_err());
}
