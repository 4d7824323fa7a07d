//! Residual convolutional units and the fusion chain that merges the four
//! reassembled maps into one half-resolution map.

use dpt_tensor::{Scalar, Var};

use crate::config::DptConfig;
use crate::error::{input_err, Result};
use crate::feature::FeatureMap;
use crate::nn::{self, Forward};
use crate::params::Plan;

pub fn plan(plan: &mut Plan, cfg: &DptConfig) {
    let f = cfg.features;
    let bn = cfg.uses_batch_norm();
    for i in 0..cfg.hooks.len() {
        let prefix = format!("fusion.{i}");
        // The deepest block has no finer skip input.
        if i + 1 < cfg.hooks.len() {
            plan_rcu(plan, &format!("{prefix}.rcu1"), f, bn);
        }
        plan_rcu(plan, &format!("{prefix}.rcu2"), f, bn);
        plan.conv(&format!("{prefix}.out"), f, f, 1, true);
    }
}

pub fn plan_rcu(plan: &mut Plan, prefix: &str, channels: usize, bn: bool) {
    for k in 1..=2 {
        plan.conv(&format!("{prefix}.conv{k}"), channels, channels, 3, !bn);
        if bn {
            plan.batch_norm(&format!("{prefix}.bn{k}"), channels);
        }
    }
}

/// `x + conv(relu(conv(relu(x))))`, with batch norm after each conv when
/// enabled.
pub fn residual_conv_unit<T: Scalar>(ctx: &Forward<T>, prefix: &str, x: &Var<T>, use_bn: bool) -> Result<Var<T>> {
    let tape = ctx.tape();
    let mut y = x.clone();
    for k in 1..=2 {
        y = tape.relu(&y)?;
        y = nn::conv(ctx, &format!("{prefix}.conv{k}"), &y, 1, 1)?;
        if use_bn {
            y = nn::batch_norm(ctx, &format!("{prefix}.bn{k}"), &y)?;
        }
    }
    if y.shape() != x.shape() {
        return Err(input_err(format!(
            "{prefix}: residual branch {:?} does not match input {:?}",
            y.shape(),
            x.shape()
        )));
    }
    Ok(tape.add(&y, x)?)
}

/// Adds the RCU-refined skip map (if any), refines again, upsamples by two
/// and applies the 1x1 output projection.
pub fn fusion_block<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    deeper: &FeatureMap<T>,
    skip: Option<&FeatureMap<T>>,
    use_bn: bool,
) -> Result<FeatureMap<T>> {
    let tape = ctx.tape();
    let mut x = deeper.data.clone();
    if let Some(skip) = skip {
        if skip.shape() != deeper.shape() {
            return Err(input_err(format!(
                "{prefix}: skip {:?} does not match deeper map {:?}",
                skip.shape(),
                deeper.shape()
            )));
        }
        let refined = residual_conv_unit(ctx, &format!("{prefix}.rcu1"), &skip.data, use_bn)?;
        x = tape.add(&x, &refined)?;
    }
    let x = residual_conv_unit(ctx, &format!("{prefix}.rcu2"), &x, use_bn)?;
    let up = tape.bilinear_resize(&x, 2 * deeper.height(), 2 * deeper.width())?;
    FeatureMap::new(nn::conv(ctx, &format!("{prefix}.out"), &up, 1, 0)?)
}

#[derive(Debug, Clone)]
pub struct Decoded<T: Scalar> {
    /// Final half-resolution map.
    pub output: FeatureMap<T>,
    /// Output of the penultimate fusion block (1/4 resolution).
    pub penultimate: FeatureMap<T>,
    /// Every fusion output, deepest first.
    pub stages: Vec<FeatureMap<T>>,
}

/// Runs the fusion chain from the 1/32 map upward. `maps` are ordered
/// shallow to deep.
pub fn decode<T: Scalar>(ctx: &Forward<T>, maps: &[FeatureMap<T>], use_bn: bool) -> Result<Decoded<T>> {
    if maps.len() < 2 {
        return Err(input_err("decode needs at least two maps"));
    }
    let n = maps.len();
    let mut stages = Vec::with_capacity(n);
    let mut path = fusion_block(ctx, &format!("fusion.{}", n - 1), &maps[n - 1], None, use_bn)?;
    stages.push(path.clone());
    for i in (0..n - 1).rev() {
        path = fusion_block(ctx, &format!("fusion.{i}"), &path, Some(&maps[i]), use_bn)?;
        stages.push(path.clone());
    }
    Ok(Decoded {
        output: path,
        penultimate: stages[n - 2].clone(),
        stages,
    })
}
