//! Depth and segmentation output heads and the combined training loss.

use dpt_tensor::{Scalar, Tape, Var};

use crate::config::{DptConfig, Head};
use crate::error::{input_err, Result};
use crate::feature::FeatureMap;
use crate::nn::{self, Forward};
use crate::params::Plan;

/// Channels after the depth head's second convolution.
pub const DEPTH_HIDDEN: usize = 32;

/// Default weight of the auxiliary segmentation loss.
pub const AUX_WEIGHT: f64 = 0.2;

pub fn plan(plan: &mut Plan, cfg: &DptConfig) {
    let f = cfg.features;
    match &cfg.head {
        Head::Depth => {
            plan.conv("head.conv1", f, f / 2, 3, true);
            plan.conv("head.conv2", f / 2, DEPTH_HIDDEN, 3, true);
            plan.conv("head.conv3", DEPTH_HIDDEN, 1, 1, true);
        }
        Head::Segmentation { num_classes, aux, .. } => {
            plan_seg(plan, "head", f, *num_classes);
            if *aux {
                plan_seg(plan, "aux", f, *num_classes);
            }
        }
    }
}

fn plan_seg(plan: &mut Plan, prefix: &str, f: usize, classes: usize) {
    plan.conv(&format!("{prefix}.conv"), f, f, 3, false);
    plan.batch_norm(&format!("{prefix}.bn"), f);
    plan.conv(&format!("{prefix}.cls"), f, classes, 1, true);
}

fn check_channels<T: Scalar>(prefix: &str, f: &FeatureMap<T>, ctx: &Forward<T>, first_conv: &str) -> Result<()> {
    let w = ctx.p(&format!("{prefix}.{first_conv}.weight"))?;
    if w.shape()[1] != f.channels() {
        return Err(input_err(format!(
            "{prefix}: expects {} channels, got {}",
            w.shape()[1],
            f.channels()
        )));
    }
    Ok(())
}

/// 3x3 conv halving channels, bilinear upsample to `out`, 3x3 conv to 32,
/// ReLU, 1x1 conv to one channel, ReLU. Returns `1 x H x W` non-negative
/// inverse depth.
pub fn depth_head<T: Scalar>(ctx: &Forward<T>, prefix: &str, f: &FeatureMap<T>, out: (usize, usize)) -> Result<Var<T>> {
    check_channels(prefix, f, ctx, "conv1")?;
    let tape = ctx.tape();
    let x = nn::conv(ctx, &format!("{prefix}.conv1"), &f.data, 1, 1)?;
    let x = tape.bilinear_resize(&x, out.0, out.1)?;
    let x = nn::conv(ctx, &format!("{prefix}.conv2"), &x, 1, 1)?;
    let x = tape.relu(&x)?;
    let x = nn::conv(ctx, &format!("{prefix}.conv3"), &x, 1, 0)?;
    Ok(tape.relu(&x)?)
}

/// 3x3 conv + batch norm + ReLU, dropout (training only), 1x1 conv to
/// class logits, bilinear upsample to `out`.
pub fn segmentation_head<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    f: &FeatureMap<T>,
    dropout: f64,
    out: (usize, usize),
) -> Result<Var<T>> {
    check_channels(prefix, f, ctx, "conv")?;
    let tape = ctx.tape();
    let x = nn::conv(ctx, &format!("{prefix}.conv"), &f.data, 1, 1)?;
    let x = nn::batch_norm(ctx, &format!("{prefix}.bn"), &x)?;
    let x = tape.relu(&x)?;
    let x = nn::dropout(ctx, &x, dropout)?;
    let x = nn::conv(ctx, &format!("{prefix}.cls"), &x, 1, 0)?;
    Ok(tape.bilinear_resize(&x, out.0, out.1)?)
}

/// `main + weight * aux`.
pub fn combined_loss<T: Scalar>(tape: &Tape<T>, main: &Var<T>, aux: Option<&Var<T>>, weight: f64) -> Result<Var<T>> {
    match aux {
        Some(aux) => Ok(tape.add(main, &tape.scale(aux, T::lit(weight))?)?),
        None => Ok(main.clone()),
    }
}

/// Scalar form of [`combined_loss`].
pub fn combine_losses(main: f64, aux: f64, weight: f64) -> f64 {
    main + weight * aux
}
