use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpt_core::image::{self, Format, Image};
use dpt_core::params::Kind;
use dpt_core::{archive, Dpt, DptConfig, Tensor};
use dpt_cli::{EXIT_CONFIG, EXIT_GRADCHECK, EXIT_IO, EXIT_NUMERIC};

fn dpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpt"))
        .args(args)
        .env_remove("DPT_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_ppm(dir: &Path, name: &str, h: usize, w: usize) -> PathBuf {
    let path = dir.join(name);
    let data = (0..3 * h * w).map(|i| (i * 13 % 256) as f32).collect();
    let img = Image {
        maxval: Some(255),
        ..Image::new(3, h, w, data).unwrap()
    };
    image::write(&path, &img, Format::Netpbm8).unwrap();
    path
}

#[test]
fn describe_prints_shapes_and_total() {
    let out = dpt(&["describe", "--preset", "base", "--size", "480"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("patch tokens 900"), "{text}");
    assert!(text.contains(&format!("params total        {}", dpt_core::count_parameters(&DptConfig::base()))));
}

#[test]
fn describe_accepts_inline_and_file_configs() {
    let dir = tempfile::tempdir().unwrap();
    let doc = DptConfig::toy().to_json();
    let file = dir.path().join("toy.json");
    std::fs::write(&file, &doc).unwrap();
    let from_file = dpt(&["describe", "--config", s(&file), "--size", "64"]);
    let inline = dpt(&["describe", "--config", &doc, "--size", "64"]);
    assert!(from_file.status.success());
    assert_eq!(stdout(&from_file), stdout(&inline));

    let dumped = dpt(&["describe", "--preset", "toy", "--dump-config"]);
    assert_eq!(DptConfig::from_json(&stdout(&dumped)).unwrap(), DptConfig::toy());
}

#[test]
fn config_errors_exit_with_code_2() {
    assert_eq!(dpt(&["describe", "--preset", "huge"]).status.code(), Some(EXIT_CONFIG));
    assert_eq!(dpt(&["describe", "--preset", "toy", "--size", "100"]).status.code(), Some(EXIT_CONFIG));
    assert_eq!(dpt(&["describe", "--config", "{\"bad\": 1}"]).status.code(), Some(EXIT_CONFIG));
    let guard = dpt(&["gradcheck", "--preset", "large"]);
    assert_eq!(guard.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&guard.stderr).contains("limited to"));
}

#[test]
fn io_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ppm");
    let out = dir.path().join("o.dptf");
    assert_eq!(dpt(&["infer", s(&missing), "-o", s(&out)]).status.code(), Some(EXIT_IO));

    let input = write_ppm(dir.path(), "in.ppm", 64, 64);
    let truncated = dir.path().join("t.dptw");
    let bytes = archive::encode(Dpt::<f32>::new(DptConfig::toy(), 0).unwrap().params());
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let run = dpt(&["infer", "--weights", s(&truncated), s(&input), "-o", s(&out)]);
    assert_eq!(run.status.code(), Some(EXIT_IO));
    assert!(String::from_utf8_lossy(&run.stderr).contains("truncated"));
    assert!(!out.exists());
}

#[test]
fn infer_rejects_unaligned_sizes_unless_padding() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_ppm(dir.path(), "odd.ppm", 100, 70);
    let out = dir.path().join("d.dptf");
    let run = dpt(&["infer", s(&input), "-o", s(&out)]);
    assert_eq!(run.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&run.stderr).contains("not divisible by 32"));

    assert!(dpt(&["infer", "--auto-pad", s(&input), "-o", s(&out)]).status.success());
    let map = image::read(&out).unwrap();
    assert_eq!((map.channels, map.height, map.width), (1, 100, 70));
    assert!(map.data.iter().all(|&v| v >= 0.0));
}

#[test]
fn infer_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let model = Dpt::<f32>::new(DptConfig::toy(), 8).unwrap();
    let weights = dir.path().join("w.dptw");
    archive::save(model.params(), &weights).unwrap();
    let input = write_ppm(dir.path(), "in.ppm", 64, 96);
    let out = dir.path().join("d.dptf");
    assert!(dpt(&["infer", "--weights", s(&weights), s(&input), "-o", s(&out)]).status.success());

    let x = image::Normalization::default().apply::<f32>(&image::read(&input).unwrap()).unwrap();
    let dpt_core::Prediction::Depth(d) = model.infer(&x).unwrap() else { panic!() };
    assert_eq!(image::read(&out).unwrap().data, d.data());
}

#[test]
fn f64_archives_load_for_inference() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w64.dptw");
    assert!(dpt(&["init", "--preset", "toy", "--double", "-o", s(&weights)]).status.success());
    let input = write_ppm(dir.path(), "in.ppm", 64, 64);
    let out = dir.path().join("d.dptf");
    assert!(dpt(&["infer", "--weights", s(&weights), s(&input), "-o", s(&out)]).status.success());
}

#[test]
fn segmentation_writes_labels_and_logits() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_ppm(dir.path(), "in.ppm", 64, 64);
    let labels = dir.path().join("l.pgm");
    let logits = dir.path().join("l.dptf");
    let run = dpt(&["infer", "--preset", "toy-seg", s(&input), "-o", s(&labels), "--logits", s(&logits)]);
    assert!(run.status.success());
    let l = image::read(&labels).unwrap();
    let z = image::read(&logits).unwrap();
    assert_eq!((z.channels, z.height, z.width), (4, 64, 64));
    let plane = 64 * 64;
    for p in 0..plane {
        let best = (0..4).max_by(|&a, &b| z.data[a * plane + p].total_cmp(&z.data[b * plane + p])).unwrap();
        assert_eq!(l.data[p] as usize, best);
    }
}

#[test]
fn non_finite_output_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut params = Dpt::<f32>::new(DptConfig::toy(), 0).unwrap().into_params();
    params.insert("head.conv3.bias", Tensor::new(&[1], vec![f32::NAN]).unwrap(), Kind::Learnable);
    let weights = dir.path().join("nan.dptw");
    archive::save(&params, &weights).unwrap();
    let input = write_ppm(dir.path(), "in.ppm", 64, 64);
    let out = dir.path().join("d.dptf");
    let run = dpt(&["infer", "--weights", s(&weights), s(&input), "-o", s(&out)]);
    assert_eq!(run.status.code(), Some(EXIT_NUMERIC));
}

#[test]
fn gradcheck_passes_and_flags_the_corrupted_fixture() {
    let ok = dpt(&["gradcheck", "--preset", "toy", "--samples", "1"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS toy depth masked-MSE"));

    let bad = dpt(&["gradcheck", "--preset", "toy", "--samples", "1", "--fixture"]);
    assert_eq!(bad.status.code(), Some(EXIT_GRADCHECK));
    assert!(stdout(&bad).contains("FAIL corrupted_relu"));
}

#[test]
fn bench_reports_every_size_and_respects_thread_env() {
    let run = Command::new(env!("CARGO_BIN_EXE_dpt"))
        .args(["bench", "--preset", "toy", "--size", "64,128", "--runs", "2", "--warmup", "0", "--json"])
        .env("DPT_THREADS", "2")
        .output()
        .unwrap();
    assert!(run.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    let rows = doc["latency"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["timing"]["runs"], 2);
    assert!(rows[1]["flops"].as_u64().unwrap() > rows[0]["flops"].as_u64().unwrap());
    assert!(doc["degradation"].is_null());

    let zero = Command::new(env!("CARGO_BIN_EXE_dpt"))
        .args(["describe"])
        .env("DPT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(zero.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn bench_defaults_to_400_runs() {
    use clap::Parser;
    let cli = dpt_cli::Cli::try_parse_from(["dpt", "bench"]).unwrap();
    let dpt_cli::Command::Bench { runs, .. } = cli.command else { panic!() };
    assert_eq!(runs, 400);
}

#[test]
fn bench_with_ground_truth_emits_degradation_table() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_ppm(dir.path(), "img.ppm", 64, 64);
    let depth = dir.path().join("depth.dptf");
    let gt = Image::new(1, 64, 64, (0..64 * 64).map(|i| 1.0 + (i % 64) as f32 / 32.0).collect()).unwrap();
    image::write(&depth, &gt, Format::Float).unwrap();
    let sample = format!("{},{}", s(&img), s(&depth));
    let run = dpt(&[
        "bench", "--preset", "toy", "--size", "32,64,96", "--runs", "1", "--warmup", "0", "--sample", &sample,
        "--reference", "64",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = stdout(&run);
    assert!(text.contains("reference 64"));
    assert!(text.lines().any(|l| l.trim_start().starts_with("64 ") && l.trim_end().ends_with("0.00")));
}

#[test]
fn eval_depth_and_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let gt: Vec<f32> = (0..16).map(|i| 1.0 + i as f32).collect();
    let gt_path = dir.path().join("gt.dptf");
    image::write(&gt_path, &Image::new(1, 4, 4, gt.clone()).unwrap(), Format::Float).unwrap();
    // Inverse depth up to scale 3 and shift 0.5 aligns perfectly.
    let pred: Vec<f32> = gt.iter().map(|g| 3.0 / g + 0.5).collect();
    let pred_path = dir.path().join("p.dptf");
    image::write(&pred_path, &Image::new(1, 4, 4, pred).unwrap(), Format::Float).unwrap();
    let run = dpt(&["eval", s(&pred_path), s(&gt_path)]);
    let text = stdout(&run);
    let abs_rel: f64 = text.lines().find_map(|l| l.strip_prefix("abs_rel=")).unwrap().parse().unwrap();
    assert!(abs_rel < 1e-5, "{text}");
    assert!(text.contains("pixels=16"));

    let labels = |name: &str, v: Vec<f32>| {
        let p = dir.path().join(name);
        let img = Image {
            maxval: Some(255),
            ..Image::new(1, 1, 4, v).unwrap()
        };
        image::write(&p, &img, Format::Netpbm8).unwrap();
        p
    };
    let p = labels("p.pgm", vec![0.0, 0.0, 1.0, 1.0]);
    let g = labels("g.pgm", vec![0.0, 1.0, 1.0, 1.0]);
    let run = dpt(&["eval", "--task", "seg", "--json", s(&p), s(&g)]);
    let doc: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(doc["pix_acc"], 0.75);
    assert!((doc["miou"].as_f64().unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn convert_round_trips_between_formats() {
    let dir = tempfile::tempdir().unwrap();
    let ppm = write_ppm(dir.path(), "a.ppm", 4, 6);
    let raw = dir.path().join("a.dptf");
    let back = dir.path().join("b.ppm");
    assert!(dpt(&["convert", s(&ppm), s(&raw)]).status.success());
    assert!(dpt(&["convert", s(&raw), s(&back)]).status.success());
    assert_eq!(image::read(&ppm).unwrap().data, image::read(&back).unwrap().data);

    let wide = dir.path().join("w.pgm");
    let map = dir.path().join("m.dptf");
    image::write(&map, &Image::new(1, 1, 3, vec![-1.0, 0.0, 1.0]).unwrap(), Format::Float).unwrap();
    assert!(dpt(&["convert", "--display", "--bits", "16", s(&map), s(&wide)]).status.success());
    assert_eq!(image::read(&wide).unwrap().data, vec![0.0, 32767.5f32.round(), 65535.0]);
    assert_eq!(dpt(&["convert", "--bits", "12", s(&map), s(&wide)]).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn overfit_command_reaches_target() {
    let run = dpt(&["overfit", "--every", "100"]);
    assert!(run.status.success());
    assert!(stdout(&run).contains("< 1e-3 at step"));
}
