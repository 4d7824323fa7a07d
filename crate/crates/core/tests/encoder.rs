use std::collections::HashMap;

use dpt_core::encoder::{self, HookOutput};
use dpt_core::shapes;
use dpt_core::{Dpt, DptConfig, Forward, Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bind<'t>(tape: &'t Tape<f64>, params: &[(&str, Tensor<f64>)]) -> Forward<'t, f64> {
    let vars = params
        .iter()
        .map(|(n, t)| (n.to_string(), tape.constant(t.clone())))
        .collect::<HashMap<_, _>>();
    Forward::from_vars(tape, vars, Mode::Eval, 0)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn tiny_cfg(d: usize, heads: usize) -> DptConfig {
    DptConfig {
        embed_dim: d,
        heads,
        ..DptConfig::toy()
    }
}

#[test]
fn patch_counts_at_384_and_480() {
    let base = DptConfig::base();
    assert_eq!(shapes::describe(&base, 384, 384).unwrap().patch_tokens, 576);
    assert_eq!(shapes::describe(&base, 480, 480).unwrap().patch_tokens, 900);

    // Actually embed at both sizes with a narrow encoder (same p = 16).
    let cfg = DptConfig::toy();
    let model = Dpt::<f32>::new(cfg.clone(), 1).unwrap();
    for (size, n_p) in [(384, 576), (480, 900)] {
        let tape = Tape::inference();
        let ctx = model.bind(&tape, Mode::Eval, 0);
        let image = tape.constant(Tensor::zeros(&[3, size, size]));
        let t = encoder::embed_patches(&ctx, &cfg, &image).unwrap();
        assert_eq!(t.num_patches(), n_p);
        assert_eq!(t.tokens.shape(), &[n_p + 1, cfg.embed_dim]);
    }
}

#[test]
fn single_patch_image_gives_two_tokens() {
    let cfg = DptConfig::toy();
    let model = Dpt::<f64>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    let t = encoder::embed_patches(&ctx, &cfg, &tape.constant(random(&[3, 16, 16], 3))).unwrap();
    assert_eq!(t.grid, (1, 1));
    assert_eq!(t.tokens.shape(), &[2, 32]);
}

#[test]
fn zero_image_tokens_equal_projection_bias() {
    let cfg = DptConfig::toy();
    let mut model = Dpt::<f64>::new(cfg.clone(), 0).unwrap();
    let bias = random(&[32], 11);
    let store = model.params_mut();
    store.set("encoder.patch_embed.bias", bias.clone()).unwrap();
    store.zero_prefix("encoder.pos_embed");
    store.zero_prefix("encoder.cls_token");

    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    let t = encoder::embed_patches(&ctx, &cfg, &tape.constant(Tensor::zeros(&[3, 64, 64]))).unwrap();
    let v = t.tokens.value();
    assert!(v.data()[..32].iter().all(|&x| x == 0.0), "readout row stays zero");
    for row in 1..17 {
        assert_eq!(&v.data()[row * 32..(row + 1) * 32], bias.data());
    }
}

#[test]
fn pos_embed_two_by_two_to_three_by_three() {
    let tape = Tape::<f64>::inference();
    // Readout row first, then the 2x2 grid row-major, one channel.
    let pos = tape.constant(Tensor::new(&[5, 1], vec![9.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = encoder::interpolate_pos_embed(&tape, &pos, (2, 2), (3, 3)).unwrap();
    // Align-corners bilinear: the middle sample sits halfway between the
    // corners, so each interior value is the mean of its neighbours.
    let expected = [9.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0, 3.0, 3.5, 4.0];
    assert_eq!(out.shape(), &[10, 1]);
    for (a, b) in out.value().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn constant_pos_embed_stays_constant() {
    let tape = Tape::<f64>::inference();
    let pos = tape.constant(Tensor::full(&[17, 3], 0.25));
    for dst in [(1, 1), (3, 5), (7, 2), (24, 24)] {
        let out = encoder::interpolate_pos_embed(&tape, &pos, (4, 4), dst).unwrap();
        assert_eq!(out.shape(), &[dst.0 * dst.1 + 1, 3]);
        assert!(out.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

#[test]
fn same_grid_interpolation_is_bit_exact() {
    let tape = Tape::<f32>::inference();
    let pos = tape.constant(Tensor::from_fn(&[577, 8], |i| (i as f32 * 0.731).sin()));
    let out = encoder::interpolate_pos_embed(&tape, &pos, (24, 24), (24, 24)).unwrap();
    assert_eq!(out.value().data(), pos.value().data());
}

#[test]
fn attention_rows_sum_to_one() {
    // Two tokens (one patch plus readout). Identity value and output
    // projections expose the attention-weighted sum of the inputs, and
    // with value rows e_0 and e_1 the outputs are the attention rows.
    let d = 2;
    let mut qkv_w = random(&[d, 3 * d], 5).to_vec();
    for r in 0..d {
        for c in 0..d {
            qkv_w[r * 3 * d + 2 * d + c] = if r == c { 1.0 } else { 0.0 };
        }
    }
    let tape = Tape::inference();
    let ctx = bind(
        &tape,
        &[
            ("a.qkv.weight", Tensor::new(&[d, 3 * d], qkv_w).unwrap()),
            ("a.qkv.bias", Tensor::zeros(&[3 * d])),
            ("a.proj.weight", Tensor::new(&[d, d], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            ("a.proj.bias", Tensor::zeros(&[d])),
        ],
    );
    let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = encoder::mhsa(&ctx, "a", &x, 1).unwrap();
    for row in y.value().data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-14);
        assert!(row.iter().all(|&w| w > 0.0));
    }
}

#[test]
fn zero_values_give_output_bias_everywhere() {
    let d = 8;
    let mut qkv_w = random(&[d, 3 * d], 7).to_vec();
    for r in 0..d {
        for c in 2 * d..3 * d {
            qkv_w[r * 3 * d + c] = 0.0;
        }
    }
    let mut qkv_b = random(&[3 * d], 8).to_vec();
    qkv_b[2 * d..].iter_mut().for_each(|b| *b = 0.0);
    let b = random(&[d], 9);
    let tape = Tape::inference();
    let ctx = bind(
        &tape,
        &[
            ("a.qkv.weight", Tensor::new(&[d, 3 * d], qkv_w).unwrap()),
            ("a.qkv.bias", Tensor::new(&[3 * d], qkv_b).unwrap()),
            ("a.proj.weight", random(&[d, d], 10)),
            ("a.proj.bias", b.clone()),
        ],
    );
    let y = encoder::mhsa(&ctx, "a", &tape.constant(random(&[5, d], 12)), 2).unwrap();
    for row in y.value().data().chunks(d) {
        assert_eq!(row, b.data());
    }
}

#[test]
fn three_token_attention_matches_hand_oracle() {
    let x = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    // qkv weight is [in = 2, out = 6] with columns q0 q1 k0 k1 v0 v1.
    let w_qkv = [[1.0, 0.5, 0.0, 1.0, 2.0, 0.0], [0.0, 1.0, 1.0, -1.0, 0.0, 3.0]];
    let b_qkv = [0.1, 0.0, 0.0, 0.2, 0.0, -1.0];
    let w_proj = [[1.0, 2.0], [-1.0, 0.5]];
    let b_proj = [0.0, 1.0];

    let tape = Tape::inference();
    let flat = |m: &[[f64; 2]]| m.iter().flatten().copied().collect::<Vec<_>>();
    let ctx = bind(
        &tape,
        &[
            ("a.qkv.weight", Tensor::new(&[2, 6], w_qkv.iter().flatten().copied().collect()).unwrap()),
            ("a.qkv.bias", Tensor::new(&[6], b_qkv.to_vec()).unwrap()),
            ("a.proj.weight", Tensor::new(&[2, 2], flat(&w_proj)).unwrap()),
            ("a.proj.bias", Tensor::new(&[2], b_proj.to_vec()).unwrap()),
        ],
    );
    let got = encoder::mhsa(&ctx, "a", &tape.constant(Tensor::new(&[3, 2], flat(&x)).unwrap()), 1).unwrap();

    let mut qkv = [[0.0; 6]; 3];
    for i in 0..3 {
        for j in 0..6 {
            qkv[i][j] = b_qkv[j] + x[i][0] * w_qkv[0][j] + x[i][1] * w_qkv[1][j];
        }
    }
    let scale = 1.0 / 2f64.sqrt();
    for i in 0..3 {
        let scores: Vec<f64> = (0..3)
            .map(|j| scale * (qkv[i][0] * qkv[j][2] + qkv[i][1] * qkv[j][3]))
            .collect();
        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut att = [0.0; 2];
        for j in 0..3 {
            att[0] += e[j] / z * qkv[j][4];
            att[1] += e[j] / z * qkv[j][5];
        }
        for c in 0..2 {
            let want = b_proj[c] + att[0] * w_proj[0][c] + att[1] * w_proj[1][c];
            let have = got.value().data()[i * 2 + c];
            assert!((want - have).abs() < 1e-12, "token {i} ch {c}: {have} vs {want}");
        }
    }
}

fn layer_params(d: usize, seed: u64) -> Vec<(String, Tensor<f64>)> {
    let mut plan = dpt_core::Plan::new();
    encoder::plan_layer(&mut plan, "l", d, 4);
    let store = plan.initialize::<f64>(seed);
    let mut out: Vec<(String, Tensor<f64>)> = store.iter().map(|(n, t, _)| (n.to_string(), t.clone())).collect();
    // Make every tensor non-trivial so the identity test means something.
    for (i, (_, t)) in out.iter_mut().enumerate() {
        let noise = random(t.shape(), 100 + i as u64);
        *t = t.zip_map(&noise, |a, b| a + 0.3 * b).unwrap();
    }
    out
}

#[test]
fn zero_output_projections_make_the_layer_identity() {
    let d = 8;
    let mut params = layer_params(d, 4);
    for (name, t) in params.iter_mut() {
        if name.starts_with("l.attn.proj") || name.starts_with("l.mlp.fc2") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let refs: Vec<(&str, Tensor<f64>)> = params.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let tape = Tape::inference();
    let ctx = bind(&tape, &refs);
    let x = random(&[5, d], 21);
    let y = encoder::transformer_layer(&ctx, "l", &tape.constant(x.clone()), 2, 1e-6).unwrap();
    assert_eq!(y.value(), &x);
}

#[test]
fn transformer_stack_is_permutation_equivariant_over_patches() {
    let d = 8;
    let n_p = 6;
    let mut layers = Vec::new();
    for l in 0..3 {
        for (name, t) in layer_params(d, l) {
            layers.push((name.replacen("l.", &format!("l{l}."), 1), t));
        }
    }
    let refs: Vec<(&str, Tensor<f64>)> = layers.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    let tape = Tape::inference();
    let ctx = bind(&tape, &refs);

    let x = random(&[n_p + 1, d], 31);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| {
        let mut rows = t.data()[..d].to_vec();
        for &p in &perm {
            rows.extend_from_slice(&t.data()[(p + 1) * d..(p + 2) * d]);
        }
        Tensor::new(&[n_p + 1, d], rows).unwrap()
    };
    let run = |x: Tensor<f64>| {
        let mut v = tape.constant(x);
        for l in 0..3 {
            v = encoder::transformer_layer(&ctx, &format!("l{l}"), &v, 2, 1e-6).unwrap();
        }
        v.into_value()
    };
    let a = permute(&run(x.clone()));
    let b = run(permute(&x));
    assert!(a.allclose(&b, 1e-12));
}

#[test]
fn every_layer_conserves_token_count() {
    let cfg = DptConfig::toy();
    let model = Dpt::<f64>::new(cfg.clone(), 2).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    for size in [64, 96, 128] {
        let image = tape.constant(random(&[3, size, size], size as u64));
        let t0 = encoder::embed_patches(&ctx, &cfg, &image).unwrap();
        let mut x = t0.tokens.clone();
        for l in 0..cfg.layers {
            let y = encoder::transformer_layer(&ctx, &format!("encoder.layers.{l}"), &x, cfg.heads, cfg.ln_eps).unwrap();
            assert_eq!(y.shape(), x.shape());
            x = y;
        }
        assert_eq!(x.shape()[0], (size / 16) * (size / 16) + 1);
    }
}

#[test]
fn toy_encoder_hooks_four_token_sets() {
    let cfg = DptConfig::toy();
    let model = Dpt::<f64>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    let hooks = encoder::encode(&ctx, &cfg, &tape.constant(random(&[3, 64, 64], 1))).unwrap();
    assert_eq!(hooks.len(), 4);
    for (i, h) in hooks.iter().enumerate() {
        let HookOutput::Tokens(t) = h else { panic!("toy hooks are token sets") };
        assert_eq!(t.layer, i + 1);
        assert_eq!(t.tokens.shape(), &[17, 32]);
    }
}

#[test]
fn tokens_track_input_size_for_rectangular_inputs() {
    let cfg = tiny_cfg(16, 2);
    let model = Dpt::<f64>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::inference();
    let ctx = model.bind(&tape, Mode::Eval, 0);
    for (h, w) in [(32, 96), (160, 64)] {
        let hooks = encoder::encode(&ctx, &cfg, &tape.constant(random(&[3, h, w], 2))).unwrap();
        let HookOutput::Tokens(t) = &hooks[3] else { panic!() };
        assert_eq!(t.grid, (h / 16, w / 16));
        assert_eq!(t.num_patches(), h * w / 256);
    }
}

#[test]
fn preset_hooks() {
    use dpt_core::Hook::Layer;
    assert_eq!(DptConfig::base().hooks, vec![Layer(3), Layer(6), Layer(9), Layer(12)]);
    assert_eq!(DptConfig::large().hooks, vec![Layer(5), Layer(12), Layer(18), Layer(24)]);
}
