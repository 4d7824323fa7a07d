//! Finite-difference gradient checks: every primitive op, plus end-to-end
//! losses of small models.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dpt_tensor::{gradcheck, GradcheckOptions, GradcheckReport, Tape, Tensor, Var};

use crate::config::{DptConfig, Head, HybridConfig};
use crate::error::{config_err, DptError, Result};
use crate::hybrid;
use crate::model::{self, Dpt};
use crate::nn::{Forward, Mode};
use crate::params::{Kind, Plan};

/// Models larger than this are refused by the end-to-end check.
pub const TOY_PARAM_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    /// Per-leaf worst relative error, in leaf order.
    pub leaf_errors: Vec<f64>,
    /// Display names of the leaves, when known.
    pub leaf_names: Vec<String>,
}

impl CheckResult {
    fn from_report(name: &str, r: &GradcheckReport) -> Self {
        Self {
            name: name.to_string(),
            checked: r.checked(),
            max_rel_err: r.max_rel_err,
            passed: r.passed,
            leaf_errors: r.leaves.iter().map(|l| l.max_rel_err).collect(),
            leaf_names: Vec::new(),
        }
    }

    /// Leaf with the largest error, by name when known.
    pub fn worst_leaf(&self) -> Option<(String, f64)> {
        let (i, e) = self
            .leaf_errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        let name = self.leaf_names.get(i).cloned().unwrap_or_else(|| format!("leaf {i}"));
        Some((name, *e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSuite {
    pub tol: f64,
    pub results: Vec<CheckResult>,
}

impl CheckSuite {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<28} max_rel_err={:.3e} checked={}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.max_rel_err,
                r.checked
            )?;
        }
        write!(
            f,
            "{}: {} checks, tolerance {:.0e}, worst {:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.results.len(),
            self.tol,
            self.max_rel_err()
        )
    }
}

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform in `±[0.1, 1]`, away from the ReLU kink.
fn off_kink(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(seed, shape).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Contracts `y` with fixed random weights.
fn project(tape: &Tape<f64>, y: &Var<f64>, seed: u64) -> dpt_tensor::Result<Var<f64>> {
    let w = tape.constant(rand_tensor(seed, y.shape()));
    tape.sum(&tape.mul(y, &w)?)
}

type OpFn = Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> dpt_tensor::Result<Var<f64>>>;

struct OpCase {
    name: &'static str,
    leaves: Vec<Tensor<f64>>,
    f: OpFn,
}

fn case(
    name: &'static str,
    leaves: Vec<Tensor<f64>>,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> dpt_tensor::Result<Var<f64>> + 'static,
) -> OpCase {
    OpCase {
        name,
        leaves,
        f: Box::new(f),
    }
}

fn projected(
    name: &'static str,
    seed: u64,
    leaves: Vec<Tensor<f64>>,
    f: impl Fn(&Tape<f64>, &[Var<f64>]) -> dpt_tensor::Result<Var<f64>> + 'static,
) -> OpCase {
    case(name, leaves, move |t, v| {
        let y = f(t, v)?;
        project(t, &y, seed)
    })
}

fn op_cases() -> Vec<OpCase> {
    let r = rand_tensor;
    let labels = vec![Some(0), None, Some(3), Some(1), Some(2), None];
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    vec![
        projected("add", 100, vec![r(1, &[3, 4]), r(2, &[3, 4])], |t, v| t.add(&v[0], &v[1])),
        projected("sub", 101, vec![r(1, &[3, 4]), r(2, &[3, 4])], |t, v| t.sub(&v[0], &v[1])),
        projected("mul", 102, vec![r(1, &[3, 4]), r(2, &[3, 4])], |t, v| t.mul(&v[0], &v[1])),
        projected("scale", 103, vec![r(3, &[3, 4])], |t, v| t.scale(&v[0], -1.7)),
        projected("add_scalar", 104, vec![r(3, &[3, 4])], |t, v| t.add_scalar(&v[0], 0.3)),
        projected("add_bias", 105, vec![r(4, &[3, 5]), r(5, &[5])], |t, v| t.add_bias(&v[0], &v[1])),
        projected(
            "channel_affine",
            106,
            vec![r(6, &[3, 2, 4]), r(7, &[3]), r(8, &[3])],
            |t, v| t.channel_affine(&v[0], &v[1], &v[2]),
        ),
        projected("relu", 107, vec![off_kink(9, &[4, 5])], |t, v| t.relu(&v[0])),
        projected("gelu", 108, vec![r(10, &[4, 5]).map(|x| 3.0 * x)], |t, v| t.gelu(&v[0])),
        case("sum", vec![r(11, &[3, 4])], |t, v| t.sum(&v[0])),
        case("mean", vec![r(11, &[3, 4])], |t, v| t.mean(&v[0])),
        projected("reshape", 109, vec![r(12, &[4, 3])], |t, v| t.reshape(&v[0], &[2, 6])),
        projected("transpose", 110, vec![r(12, &[4, 3])], |t, v| t.transpose(&v[0])),
        projected("slice_rows", 111, vec![r(12, &[4, 3])], |t, v| t.slice_rows(&v[0], 1, 3)),
        projected("slice_cols", 112, vec![r(12, &[4, 3])], |t, v| t.slice_cols(&v[0], 1, 3)),
        projected("concat_rows", 113, vec![r(13, &[2, 3]), r(14, &[1, 3])], |t, v| {
            t.concat_rows(&[&v[0], &v[1]])
        }),
        projected("concat_cols", 114, vec![r(13, &[2, 3]), r(15, &[2, 2])], |t, v| {
            t.concat_cols(&[&v[0], &v[1]])
        }),
        projected("broadcast_rows", 115, vec![r(16, &[1, 3])], |t, v| t.broadcast_rows(&v[0], 5)),
        projected("matmul", 116, vec![r(17, &[3, 4]), r(18, &[4, 2])], |t, v| t.matmul(&v[0], &v[1])),
        projected("softmax", 117, vec![r(19, &[3, 5]).map(|x| 2.0 * x)], |t, v| t.softmax(&v[0])),
        projected(
            "layer_norm",
            118,
            vec![r(20, &[3, 6]), r(21, &[6]), r(22, &[6])],
            |t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-6),
        ),
        projected(
            "group_norm",
            119,
            vec![r(23, &[4, 3, 3]), r(24, &[4]), r(25, &[4])],
            |t, v| t.group_norm(&v[0], 2, &v[1], &v[2], 1e-5),
        ),
        projected("weight_standardize", 120, vec![r(26, &[2, 3, 3, 3])], |t, v| {
            t.weight_standardize(&v[0], 1e-5)
        }),
        projected(
            "conv2d",
            121,
            vec![r(27, &[2, 6, 5]), r(28, &[3, 2, 3, 3]), r(29, &[3])],
            |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1),
        ),
        projected(
            "conv2d_strided",
            122,
            vec![r(27, &[2, 6, 5]), r(28, &[3, 2, 3, 3]), r(29, &[3])],
            |t, v| t.conv2d(&v[0], &v[1], Some(&v[2]), 2, 1),
        ),
        projected(
            "conv_transpose2d",
            123,
            vec![r(30, &[2, 3, 3]), r(31, &[2, 3, 3, 3]), r(32, &[3])],
            |t, v| t.conv_transpose2d(&v[0], &v[1], Some(&v[2]), 2, 1, 1),
        ),
        projected(
            "conv_transpose2d_k2",
            124,
            vec![r(30, &[2, 3, 3]), r(33, &[2, 3, 2, 2]), r(32, &[3])],
            |t, v| t.conv_transpose2d(&v[0], &v[1], Some(&v[2]), 2, 0, 0),
        ),
        projected("bilinear_up", 125, vec![r(34, &[2, 4, 5])], |t, v| t.bilinear_resize(&v[0], 7, 9)),
        projected("bilinear_down", 126, vec![r(34, &[2, 4, 5])], |t, v| t.bilinear_resize(&v[0], 2, 3)),
        case("cross_entropy", vec![r(35, &[4, 2, 3])], move |t, v| t.cross_entropy(&v[0], &labels)),
        case("masked_mse", vec![r(36, &[3, 4]), r(37, &[3, 4])], move |t, v| {
            t.masked_mse(&v[0], &v[1], &mask)
        }),
    ]
}

/// Names of the primitive ops covered by [`primitive_checks`].
pub fn primitive_names() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

pub fn primitive_checks(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .map(|c| {
            let report = gradcheck(&c.f, &c.leaves, opts)?;
            Ok(CheckResult::from_report(c.name, &report))
        })
        .collect()
}

/// A ReLU whose backward rule forgets the mask. The harness must flag it.
pub fn corrupted_backward_check(opts: &GradcheckOptions) -> Result<CheckResult> {
    let x = off_kink(40, &[3, 4]);
    let report = gradcheck(
        |t, v| {
            let value = v[0].value().map(|a| a.max(0.0));
            let y = t.custom("corrupted_relu", &[&v[0]], value, |g, _| Ok(vec![Some(g.clone())]))?;
            project(t, &y, 41)
        },
        &[x],
        opts,
    )?;
    Ok(CheckResult::from_report("corrupted_relu (fixture)", &report))
}

/// Refuses configurations above [`TOY_PARAM_LIMIT`] learnable parameters.
pub fn guard(cfg: &DptConfig) -> Result<usize> {
    let n = model::count_parameters(cfg);
    if n > TOY_PARAM_LIMIT {
        return Err(config_err(format!(
            "`{}` has {n} parameters; gradient checks are limited to {TOY_PARAM_LIMIT}",
            cfg.name
        )));
    }
    Ok(n)
}

#[derive(Debug, Clone)]
pub struct ModelCheckOptions {
    pub size: usize,
    pub seed: u64,
    /// Half-width of uniform noise added to every initial weight, so that
    /// zero-initialized biases do not park pre-activations exactly on a
    /// ReLU kink.
    pub jitter: f64,
    pub gradcheck: GradcheckOptions,
}

impl Default for ModelCheckOptions {
    fn default() -> Self {
        Self {
            size: 64,
            seed: 0,
            jitter: 0.05,
            gradcheck: GradcheckOptions {
                step: 1e-6,
                max_elements_per_leaf: Some(3),
                ..Default::default()
            },
        }
    }
}

/// End-to-end check of the training loss with respect to every learnable
/// tensor and the input image (sampled elements per tensor).
///
/// Depth heads use masked MSE against a positive random target. Segmentation
/// heads use cross-entropy plus the configured auxiliary weight, in train
/// mode (batch statistics, dropout with a fixed mask).
pub fn model_check(cfg: &DptConfig, opts: &ModelCheckOptions) -> Result<CheckResult> {
    guard(cfg)?;
    let model = Dpt::<f64>::new(cfg.clone(), opts.seed)?;
    let s = opts.size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let image = Tensor::from_fn(&[3, s, s], |_| rng.gen_range(-1.0..1.0));

    let mut names = Vec::new();
    let mut leaves = vec![image];
    let mut constants = HashMap::new();
    for (name, t, kind) in model.params().iter() {
        match kind {
            Kind::Learnable => {
                names.push(name.to_string());
                let noise = Tensor::from_fn(t.shape(), |_| opts.jitter * rng.gen_range(-1.0..1.0));
                leaves.push(t.zip_map(&noise, |w, n| w + n)?);
            }
            Kind::Buffer => {
                constants.insert(name.to_string(), t.clone());
            }
        }
    }

    let (mode, loss_name) = match &cfg.head {
        Head::Depth => (Mode::Eval, "depth masked-MSE"),
        Head::Segmentation { .. } => (Mode::Train, "seg CE + aux"),
    };
    let n = s * s;
    let target = Tensor::from_fn(&[s, s], |_| rng.gen_range(0.2..1.0));
    let mask: Vec<bool> = (0..n).map(|i| i % 7 != 3).collect();
    let classes = cfg.head.num_classes().unwrap_or(1);
    let labels: Vec<Option<usize>> = (0..n)
        .map(|i| (i % 11 != 5).then(|| rng.gen_range(0..classes)))
        .collect();
    let aux_weight = match &cfg.head {
        Head::Segmentation { aux_weight, .. } => *aux_weight,
        Head::Depth => 0.0,
    };
    let seed = opts.seed;

    let f = |tape: &Tape<f64>, v: &[Var<f64>]| -> dpt_tensor::Result<Var<f64>> {
        let mut vars: HashMap<String, Var<f64>> = names.iter().cloned().zip(v[1..].iter().cloned()).collect();
        for (k, t) in &constants {
            vars.insert(k.clone(), tape.constant(t.clone()));
        }
        let ctx = Forward::from_vars(tape, vars, mode, seed);
        let loss = (|| -> Result<Var<f64>> {
            let out = model::forward(&ctx, cfg, &v[0])?;
            match &cfg.head {
                Head::Depth => model::depth_loss(tape, &out, &target, &mask),
                Head::Segmentation { .. } => model::segmentation_loss(tape, &out, &labels, aux_weight),
            }
        })();
        loss.map_err(|e| match e {
            DptError::Tensor(t) => t,
            other => dpt_tensor::TensorError::Gradcheck(other.to_string()),
        })
    };
    let report = gradcheck(f, &leaves, &opts.gradcheck)?;
    let mut result = CheckResult::from_report(&format!("{} {}", cfg.name, loss_name), &report);
    result.leaf_names = std::iter::once("image".to_string()).chain(names.iter().cloned()).collect();
    Ok(result)
}

/// Gradients of the convolutional embedder alone: a fixed random
/// projection of its three outputs, with respect to the image and every
/// embedder weight.
pub fn hybrid_embedder_check(h: &HybridConfig, opts: &ModelCheckOptions) -> Result<CheckResult> {
    let mut plan = Plan::new();
    hybrid::plan(&mut plan, "hybrid", h);
    let store = plan.initialize::<f64>(opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let s = opts.size;
    let names = store.learnable_names();
    let mut leaves = vec![Tensor::from_fn(&[3, s, s], |_| rng.gen_range(-1.0..1.0))];
    for n in &names {
        let t = store.get(n)?;
        let noise = Tensor::from_fn(t.shape(), |_| opts.jitter * rng.gen_range(-1.0..1.0));
        leaves.push(t.zip_map(&noise, |w, n| w + n)?);
    }
    let seed = opts.seed;
    let f = |tape: &Tape<f64>, v: &[Var<f64>]| -> dpt_tensor::Result<Var<f64>> {
        let vars: HashMap<String, Var<f64>> = names.iter().cloned().zip(v[1..].iter().cloned()).collect();
        let ctx = Forward::from_vars(tape, vars, Mode::Eval, seed);
        let out = hybrid::embed_hybrid_at(&ctx, "hybrid", h, &v[0])
            .map_err(|e| dpt_tensor::TensorError::Gradcheck(e.to_string()))?;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for (k, map) in [out.r0, out.r1, out.tokens].iter().enumerate() {
            let term = project(tape, &map.data, seed.wrapping_add(200 + k as u64))?;
            total = tape.add(&total, &term)?;
        }
        Ok(total)
    };
    let report = gradcheck(f, &leaves, &opts.gradcheck)?;
    let mut result = CheckResult::from_report("hybrid embedder", &report);
    result.leaf_names = std::iter::once("image".to_string()).chain(names.iter().cloned()).collect();
    Ok(result)
}

/// Primitive ops followed by end-to-end checks of each configuration.
pub fn run_suite(configs: &[DptConfig], model_opts: &ModelCheckOptions) -> Result<CheckSuite> {
    let mut results = primitive_checks(&GradcheckOptions {
        tol: model_opts.gradcheck.tol,
        ..Default::default()
    })?;
    for cfg in configs {
        results.push(model_check(cfg, model_opts)?);
    }
    Ok(CheckSuite {
        tol: model_opts.gradcheck.tol,
        results,
    })
}
