use dpt_core::encoder::{self, HookOutput};
use dpt_core::hybrid;
use dpt_core::{Dpt, DptConfig, Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn toy_hybrid_resolutions_at_64() {
    let cfg = DptConfig::toy_hybrid();
    let h = cfg.hybrid_config().unwrap().clone();
    let model = Dpt::<f64>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    let image = tape.constant(random(&[3, 64, 64], 1));
    let f = hybrid::embed_hybrid(&ctx, &h, &image).unwrap();
    assert_eq!(f.r0.shape(), [h.widths[0], 16, 16]);
    assert_eq!(f.r1.shape(), [h.widths[1], 8, 8]);
    assert_eq!(f.tokens.shape(), [h.widths[2], 4, 4]);

    let hooks = encoder::encode(&ctx, &cfg, &image).unwrap();
    let HookOutput::Map(r0) = &hooks[0] else { panic!("R0 is a map") };
    let HookOutput::Map(r1) = &hooks[1] else { panic!("R1 is a map") };
    assert_eq!((r0.height(), r1.height()), (16, 8));
    for h in &hooks[2..] {
        let HookOutput::Tokens(t) = h else { panic!("deep hooks are tokens") };
        assert_eq!(t.tokens.shape(), &[17, cfg.embed_dim]);
    }
}

#[test]
fn hybrid_tokens_match_patch_count_at_384() {
    let cfg = DptConfig::toy_hybrid();
    let model = Dpt::<f32>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    let image = tape.constant(Tensor::from_fn(&[3, 384, 384], |i| ((i % 97) as f32 / 48.0) - 1.0));
    let f = hybrid::embed_hybrid(&ctx, cfg.hybrid_config().unwrap(), &image).unwrap();
    assert_eq!((f.tokens.height(), f.tokens.width()), (24, 24));
    assert_eq!(f.tokens.height() * f.tokens.width() + 1, 577);
}

#[test]
fn stage_resolutions_for_rectangular_inputs() {
    let cfg = DptConfig::toy_hybrid();
    let h = cfg.hybrid_config().unwrap().clone();
    let model = Dpt::<f64>::new(cfg, 3).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    for (hh, ww) in [(32, 96), (128, 64)] {
        let f = hybrid::embed_hybrid(&ctx, &h, &tape.constant(random(&[3, hh, ww], 5))).unwrap();
        assert_eq!((f.r0.height(), f.r0.width()), (hh / 4, ww / 4));
        assert_eq!((f.r1.height(), f.r1.width()), (hh / 8, ww / 8));
        assert_eq!((f.tokens.height(), f.tokens.width()), (hh / 16, ww / 16));
    }
}

#[test]
fn zero_input_and_zero_params_give_zero_maps() {
    let cfg = DptConfig::toy_hybrid();
    let h = cfg.hybrid_config().unwrap().clone();
    let mut model = Dpt::<f64>::new(cfg, 0).unwrap();
    model.params_mut().zero_prefix("encoder.hybrid");
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    let f = hybrid::embed_hybrid(&ctx, &h, &tape.constant(Tensor::zeros(&[3, 64, 64]))).unwrap();
    for m in [&f.r0, &f.r1, &f.tokens] {
        assert_eq!(m.data.value().max_abs(), 0.0);
    }
}

#[test]
fn weight_standardize_examples() {
    let tape = Tape::<f64>::inference();
    let eps = 1e-10;

    let constant = tape.constant(Tensor::full(&[2, 3, 3, 3], 0.7));
    assert!(tape.weight_standardize(&constant, eps).unwrap().value().max_abs() < 1e-9);

    // Mean 2, population variance 1.
    let pair = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![1.0, 3.0]).unwrap());
    let ws = tape.weight_standardize(&pair, eps).unwrap();
    assert!(ws.value().allclose(&Tensor::new(&[1, 2, 1, 1], vec![-1.0, 1.0]).unwrap(), 1e-9));

    let w = tape.constant(random(&[4, 5, 3, 3], 2));
    let once = tape.weight_standardize(&w, 1e-12).unwrap();
    let fan_in = 45;
    for filter in once.value().data().chunks(fan_in) {
        let mean = filter.iter().sum::<f64>() / fan_in as f64;
        let var = filter.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / fan_in as f64;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
    let twice = tape.weight_standardize(&once, 1e-12).unwrap();
    assert!(twice.value().allclose(once.value(), 1e-6));
}

fn norm_oracle(x: &[f64], c: usize, hw: usize, groups: usize, eps: f64) -> Vec<f64> {
    let per = c / groups * hw;
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let block = &x[g * per..(g + 1) * per];
        let mean = block.iter().sum::<f64>() / per as f64;
        let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        for i in 0..per {
            out[g * per + i] = (block[i] - mean) / (var + eps).sqrt();
        }
    }
    out
}

#[test]
fn group_norm_matches_two_pass_oracle() {
    let tape = Tape::<f64>::inference();
    let (c, h, w) = (6, 3, 4);
    let x = random(&[c, h, w], 9);
    let gamma = tape.constant(Tensor::ones(&[c]));
    let beta = tape.constant(Tensor::zeros(&[c]));
    let eps = 1e-5;
    for groups in [1, 2, 3, 6] {
        let y = tape.group_norm(&tape.constant(x.clone()), groups, &gamma, &beta, eps).unwrap();
        let want = norm_oracle(x.data(), c, h * w, groups, eps);
        for (a, b) in y.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let flat = tape.constant(Tensor::full(&[c, h, w], 3.0));
    let y = tape.group_norm(&flat, 3, &gamma, &beta, eps).unwrap();
    assert_eq!(y.value().max_abs(), 0.0);
}

#[test]
fn group_count_clamps_for_narrow_stages() {
    let h = DptConfig::toy_hybrid().hybrid_config().unwrap().clone();
    for c in [2, 4, 8, 16, 64] {
        let g = h.groups_for(c);
        assert!(g >= 1 && g <= h.groups && c % g == 0, "{c} channels -> {g} groups");
    }
}
