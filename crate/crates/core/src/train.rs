//! Plain SGD on a single synthetic sample, the smoke test that the whole
//! differentiable path trains.

use std::time::Instant;

use serde::Serialize;

use dpt_tensor::{Scalar, Tape, Tensor};

use crate::config::DptConfig;
use crate::error::{input_err, Result};
use crate::model::{self, Dpt};
use crate::nn::Mode;

/// Smooth synthetic scene: an image whose channels are low-frequency
/// patterns and an inverse-depth target in roughly `[0.3, 0.9]` that is a
/// function of the same coordinates. Every pixel is valid except a thin
/// border.
pub fn synthetic_depth_sample<T: Scalar>(size: usize) -> (Tensor<T>, Tensor<T>, Vec<bool>) {
    let n = size as f64;
    let coord = |i: usize| (i / size, i % size);
    let image = Tensor::from_fn(&[3, size, size], |i| {
        let (c, r) = (i / (size * size), i % (size * size));
        let (y, x) = coord(r);
        let (u, v) = (x as f64 / n, y as f64 / n);
        T::lit(match c {
            0 => 2.0 * u - 1.0,
            1 => 2.0 * v - 1.0,
            _ => (std::f64::consts::PI * (u + v)).sin(),
        })
    });
    let target = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = coord(i);
        let (u, v) = (x as f64 / n, y as f64 / n);
        T::lit(0.6 + 0.2 * (v - 0.5) + 0.1 * (2.0 * std::f64::consts::PI * u).cos())
    });
    let mask = (0..size * size)
        .map(|i| {
            let (y, x) = coord(i);
            y > 0 && x > 0 && y + 1 < size && x + 1 < size
        })
        .collect();
    (image, target, mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Steps over which the learning rate ramps linearly up from zero.
    pub warmup_steps: usize,
    /// Rescales the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    pub target_loss: f64,
    pub seed: u64,
    pub size: usize,
    /// Stop as soon as the loss falls below `target_loss`.
    pub stop_early: bool,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            warmup_steps: 20,
            clip_norm: Some(1.0),
            target_loss: 1e-3,
            seed: 0,
            size: 64,
            stop_early: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// First step whose loss was below the target.
    pub reached_at: Option<usize>,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Forward, masked MSE, backward and one SGD update (gradient optionally
/// clipped by global norm). Returns the loss before the update.
pub fn sgd_step<T: Scalar>(
    model: &mut Dpt<T>,
    image: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
    lr: f64,
    clip_norm: Option<f64>,
    seed: u64,
) -> Result<f64> {
    let tape = Tape::new();
    let (loss, bn_updates, grads) = {
        let ctx = model.bind(&tape, Mode::Train, seed);
        let out = model.forward(&ctx, &tape.constant(image.clone()))?;
        let loss = model::depth_loss(&tape, &out, target, mask)?;
        let grads = tape.backward(&loss)?;
        let named: Vec<(String, Tensor<T>)> = model
            .params()
            .learnable_names()
            .into_iter()
            .filter_map(|n| ctx.var(&n).map(|v| (n.clone(), grads.wrt(v))))
            .collect();
        (loss.value().item()?.as_f64(), ctx.take_bn_updates(), named)
    };
    if !loss.is_finite() {
        return Err(input_err(format!("loss became {loss}")));
    }
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    let factor = match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let step = T::lit(lr * factor);
    for (name, g) in grads {
        let p = model.params().get(&name)?;
        let updated = p.zip_map(&g, |w, d| w - step * d)?;
        model.params_mut().set(&name, updated)?;
    }
    model.apply_updates(bn_updates)?;
    Ok(loss)
}

/// Trains a freshly initialized depth model on one synthetic sample.
pub fn overfit<T: Scalar>(cfg: DptConfig, opts: &OverfitOptions) -> Result<OverfitReport> {
    if cfg.head.is_segmentation() {
        return Err(input_err("overfit demo needs a depth head"));
    }
    let start = Instant::now();
    let mut model = Dpt::<T>::new(cfg, opts.seed)?;
    let (image, target, mask) = synthetic_depth_sample::<T>(opts.size);
    let mut losses = Vec::with_capacity(opts.steps);
    let mut reached_at = None;
    for step in 0..opts.steps {
        let ramp = ((step + 1) as f64 / opts.warmup_steps.max(1) as f64).min(1.0);
        let lr = opts.learning_rate * ramp;
        let loss = sgd_step(&mut model, &image, &target, &mask, lr, opts.clip_norm, opts.seed + step as u64)?;
        losses.push(loss);
        if loss < opts.target_loss && reached_at.is_none() {
            reached_at = Some(step);
            if opts.stop_early {
                break;
            }
        }
    }
    let final_loss = *losses.last().ok_or_else(|| input_err("steps must be positive"))?;
    Ok(OverfitReport {
        losses,
        reached_at,
        final_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}
