use std::path::Path;

use dpt_core::archive;
use dpt_core::bench::{self, DepthSample};
use dpt_core::checks::{self, CheckSuite, ModelCheckOptions};
use dpt_core::dpt_tensor::{set_num_threads, DType, GradcheckOptions};
use dpt_core::image::{self, Format, Image, Normalization};
use dpt_core::metrics::{self, DepthEvalPair, GroundTruth, Report};
use dpt_core::train::{self, OverfitOptions};
use dpt_core::{shapes, Dpt, DptConfig, ParamStore, Prediction, Tensor};

use crate::{Cli, CliError, Command, Task, EXIT_GRADCHECK, EXIT_NUMERIC};

type Outcome = Result<(), CliError>;

/// Executes one parsed command line, writing reports to stdout.
pub fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        set_num_threads(n);
    }
    match cli.command {
        Command::Describe {
            model,
            size,
            width,
            dump_config,
        } => {
            let cfg = model.resolve("base")?;
            if dump_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let h = size.unwrap_or(cfg.image_size);
            let report = shapes::describe(&cfg, h, width.unwrap_or(h))?;
            println!("{report}");
            Ok(())
        }
        Command::Init {
            model,
            seed,
            double,
            output,
        } => {
            let cfg = model.resolve("toy")?;
            let plan = dpt_core::model::plan(&cfg);
            if double {
                archive::save(&plan.initialize::<f64>(seed), &output)?;
            } else {
                archive::save(&plan.initialize::<f32>(seed), &output)?;
            }
            println!("wrote {} ({} parameters)", output.display(), plan.num_learnable());
            Ok(())
        }
        Command::Infer {
            model,
            weights,
            seed,
            auto_pad,
            input,
            output,
            logits,
        } => {
            let cfg = model.resolve("toy")?;
            let model = load_model(cfg, weights.as_deref(), seed)?;
            infer(&model, &input, &output, logits.as_deref(), auto_pad)
        }
        Command::Gradcheck {
            model,
            size,
            seed,
            tol,
            samples,
            fixture,
        } => {
            let configs = match (&model.preset, &model.config) {
                (None, None) => vec![DptConfig::toy(), DptConfig::toy_seg()],
                _ => vec![model.resolve("toy")?],
            };
            for cfg in &configs {
                checks::guard(cfg)?;
            }
            let opts = ModelCheckOptions {
                size,
                seed,
                gradcheck: GradcheckOptions {
                    tol,
                    step: 1e-6,
                    max_elements_per_leaf: Some(samples),
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut suite = checks::run_suite(&configs, &opts)?;
            if fixture {
                suite.results.push(checks::corrupted_backward_check(&GradcheckOptions {
                    tol,
                    ..Default::default()
                })?);
            }
            gradcheck_outcome(&suite)
        }
        Command::Bench {
            model,
            weights,
            seed,
            sizes,
            runs,
            warmup,
            samples,
            synthetic,
            reference,
            json,
        } => {
            let cfg = model.resolve("toy")?;
            let sizes = if sizes.is_empty() { vec![cfg.image_size] } else { sizes };
            for &s in &sizes {
                cfg.check_input(s, s)?;
            }
            let reference = reference.unwrap_or(cfg.image_size);
            let model = load_model(cfg, weights.as_deref(), seed)?;
            let rows = bench::bench_model(&model, &sizes, runs, warmup, seed)?;
            let mut gt = Vec::new();
            for spec in &samples {
                gt.push(read_sample(spec)?);
            }
            for k in 0..synthetic {
                gt.push(synthetic_sample(reference, k));
            }
            let table = if gt.is_empty() {
                None
            } else {
                Some(bench::degradation_table(&model, &gt, &sizes, reference)?)
            };
            if json {
                let doc = serde_json::json!({ "latency": rows, "degradation": table });
                println!("{}", serde_json::to_string_pretty(&doc).expect("bench rows serialize"));
            } else {
                print!("{}", bench::format_bench(&rows));
                if let Some(t) = table {
                    println!("{t}");
                }
            }
            Ok(())
        }
        Command::Eval {
            task,
            prediction,
            ground_truth,
            mask,
            inverse,
            no_align,
            num_classes,
            ignore_label,
            json,
        } => {
            let pred = image::read(&prediction)?;
            let gt = image::read(&ground_truth)?;
            if (pred.height, pred.width) != (gt.height, gt.width) {
                return Err(CliError::config(format!(
                    "prediction is {}x{} but ground truth is {}x{}",
                    pred.height, pred.width, gt.height, gt.width
                )));
            }
            let text = match task {
                Task::Depth => {
                    let p: Tensor<f64> = pred.plane(0);
                    let g: Tensor<f64> = gt.plane(0);
                    let valid: Vec<bool> = match &mask {
                        Some(path) => image::read(path)?.data.iter().map(|&v| v != 0.0).collect(),
                        None => g.data().iter().map(|&v| v > 0.0 && v.is_finite()).collect(),
                    };
                    let domain = if inverse { GroundTruth::InverseDepth } else { GroundTruth::Depth };
                    let pair = DepthEvalPair::new(p.data(), g.data()).with_mask(&valid).with_domain(domain);
                    let m = metrics::depth_metrics(&pair, !no_align)?;
                    if json { m.to_json() } else { m.to_kv() }
                }
                Task::Seg => {
                    let p = labels(&pred)?;
                    let g = labels(&gt)?;
                    let classes = match num_classes {
                        Some(c) => c,
                        None => p
                            .iter()
                            .chain(g.iter().filter(|&&l| Some(l) != ignore_label))
                            .max()
                            .map_or(1, |m| m + 1),
                    };
                    let m = metrics::seg_metrics(&p, &g, classes, ignore_label)?;
                    if json { m.to_json() } else { m.to_kv() }
                }
            };
            print!("{}", text.trim_end_matches('\n'));
            println!();
            Ok(())
        }
        Command::Convert {
            input,
            output,
            display,
            bits,
        } => {
            let img = image::read(&input)?;
            let format = match (Format::from_path(&output), bits) {
                (Format::Float, _) => Format::Float,
                (_, 8) => Format::Netpbm8,
                (_, 16) => Format::Netpbm16,
                (_, b) => return Err(CliError::config(format!("--bits must be 8 or 16, got {b}"))),
            };
            let maxval = if bits == 16 { 65535 } else { 255 };
            let img = if display { image::to_display(&img, maxval) } else { img };
            image::write(&output, &img, format)?;
            Ok(())
        }
        Command::Overfit {
            model,
            steps,
            lr,
            seed,
            size,
            every,
        } => {
            let cfg = model.resolve("toy")?;
            let opts = OverfitOptions {
                steps,
                learning_rate: lr,
                seed,
                size,
                ..Default::default()
            };
            let report = train::overfit::<f32>(cfg, &opts)?;
            for (step, loss) in report.losses.iter().enumerate() {
                if step % every.max(1) == 0 {
                    println!("step {step:>4}  loss {loss:.6}");
                }
            }
            match report.reached_at {
                Some(step) => {
                    println!(
                        "loss {:.3e} < {:.0e} at step {step} ({:.1}s)",
                        report.final_loss, opts.target_loss, report.seconds
                    );
                    Ok(())
                }
                None => Err(CliError::new(
                    1,
                    format!("loss {:.3e} after {} steps, target {:.0e}", report.final_loss, steps, opts.target_loss),
                )),
            }
        }
    }
}

/// Weights from an archive of either precision, or a fresh initialization.
fn load_model(cfg: DptConfig, weights: Option<&Path>, seed: u64) -> Result<Dpt<f32>, CliError> {
    let Some(path) = weights else {
        eprintln!("note: no --weights given, using random weights from seed {seed}");
        return Ok(Dpt::new(cfg, seed)?);
    };
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let plan = dpt_core::model::plan(&cfg);
    let params: ParamStore<f32> = match archive::peek_dtype(&bytes)? {
        Some(DType::F64) => archive::decode::<f64>(&bytes, &plan)?.cast(),
        _ => archive::decode::<f32>(&bytes, &plan)?,
    };
    Ok(Dpt::from_params(cfg, params)?)
}

fn infer(model: &Dpt<f32>, input: &Path, output: &Path, logits_path: Option<&Path>, auto_pad: bool) -> Outcome {
    let img = image::read(input)?;
    let (h, w) = (img.height, img.width);
    let mut x: Tensor<f32> = Normalization::default().apply(&img)?;
    if auto_pad {
        x = image::pad_reflect(&x, 32)?;
    }
    let crop = |t: Tensor<f32>| -> Result<Tensor<f32>, CliError> {
        if auto_pad {
            Ok(image::crop(&t, h, w)?)
        } else {
            Ok(t)
        }
    };
    match model.infer(&x)? {
        Prediction::Depth(d) => {
            let (ph, pw) = (d.shape()[0], d.shape()[1]);
            let d = crop(d.reshape(&[1, ph, pw])?)?;
            check_finite(d.data())?;
            let map = Image::from_tensor(&d)?;
            write_map(output, &map, true)?;
            println!("depth {}x{} -> {}", map.height, map.width, output.display());
        }
        Prediction::Segmentation { logits, .. } => {
            check_finite(logits.data())?;
            let logits = crop(logits)?;
            let labels = dpt_core::model::argmax_channels(&logits);
            let map = Image::new(1, h, w, labels.iter().map(|&l| l as f32).collect())?;
            write_map(output, &map, false)?;
            if let Some(p) = logits_path {
                image::write(p, &Image::from_tensor(&logits)?, Format::Float)?;
            }
            println!("labels {}x{} ({} classes) -> {}", h, w, logits.shape()[0], output.display());
        }
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Outcome {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(CliError::new(EXIT_NUMERIC, format!("non-finite output at element {i}"))),
        None => Ok(()),
    }
}

/// Netpbm outputs of continuous maps are rescaled to 16 bits; label maps
/// are written as they are.
fn write_map(path: &Path, map: &Image, continuous: bool) -> Outcome {
    match Format::from_path(path) {
        Format::Float => image::write(path, map, Format::Float)?,
        _ if continuous => image::write(path, &image::to_display(map, 65535), Format::Netpbm16)?,
        _ => {
            let top = map.data.iter().cloned().fold(0.0f32, f32::max);
            let format = if top > 255.0 { Format::Netpbm16 } else { Format::Netpbm8 };
            let maxval = if format == Format::Netpbm16 { 65535 } else { 255 };
            image::write(path, &Image { maxval: Some(maxval), ..map.clone() }, format)?
        }
    }
    Ok(())
}

fn labels(img: &Image) -> Result<Vec<usize>, CliError> {
    img.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::config(format!("label map holds non-label value {v}")))
            }
        })
        .collect()
}

fn read_sample(spec: &str) -> Result<DepthSample<f32>, CliError> {
    let (img_path, depth_path) = spec
        .split_once(',')
        .ok_or_else(|| CliError::config(format!("--sample expects IMAGE,DEPTH, got `{spec}`")))?;
    let image = Normalization::default().apply(&image::read(img_path)?)?;
    let depth: Tensor<f32> = image::read(depth_path)?.plane(0);
    if depth.shape() != &image.shape()[1..] {
        return Err(CliError::config(format!("{img_path} and {depth_path} differ in size")));
    }
    let mask = depth.data().iter().map(|&v| v > 0.0 && v.is_finite()).collect();
    Ok(DepthSample { image, depth, mask })
}

/// Synthetic scene with depth ground truth; `k` varies the depth range.
fn synthetic_sample(size: usize, k: usize) -> DepthSample<f32> {
    let (image, inverse, mask) = train::synthetic_depth_sample::<f32>(size);
    let offset = 0.1 * k as f32;
    let depth = inverse.map(|v| 1.0 / (v + offset));
    DepthSample { image, depth, mask }
}

fn gradcheck_outcome(suite: &CheckSuite) -> Outcome {
    println!("{suite}");
    if suite.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = suite.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(CliError::new(EXIT_GRADCHECK, format!("gradient check failed: {}", failed.join(", "))))
    }
}
