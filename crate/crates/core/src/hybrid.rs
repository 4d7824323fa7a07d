//! Convolutional embedder: a weight-standardized, group-normalized
//! pre-activation bottleneck network.

use dpt_tensor::{Scalar, Var};

use crate::config::HybridConfig;
use crate::error::{input_err, Result};
use crate::feature::FeatureMap;
use crate::nn::{self, Forward};
use crate::params::Plan;

/// Outputs of the three stages: skip features at 1/4 and 1/8 resolution and
/// the 1/16 map whose pixels become tokens.
#[derive(Debug, Clone)]
pub struct HybridFeatures<T: Scalar> {
    pub r0: FeatureMap<T>,
    pub r1: FeatureMap<T>,
    pub tokens: FeatureMap<T>,
}

pub fn plan(plan: &mut Plan, prefix: &str, h: &HybridConfig) {
    plan.conv(&format!("{prefix}.stem"), 3, h.stem_channels, 7, false);
    let mut c_in = h.stem_channels;
    for (s, (&width, &blocks)) in h.widths.iter().zip(&h.blocks).enumerate() {
        for b in 0..blocks {
            let bp = format!("{prefix}.stages.{s}.{b}");
            let mid = width / 4;
            plan.norm(&format!("{bp}.gn1"), c_in);
            plan.conv(&format!("{bp}.conv1"), c_in, mid, 1, false);
            plan.norm(&format!("{bp}.gn2"), mid);
            plan.conv(&format!("{bp}.conv2"), mid, mid, 3, false);
            plan.norm(&format!("{bp}.gn3"), mid);
            plan.conv(&format!("{bp}.conv3"), mid, width, 1, false);
            if b == 0 {
                plan.conv(&format!("{bp}.downsample"), c_in, width, 1, false);
            }
            c_in = width;
        }
    }
    plan.norm(&format!("{prefix}.norm"), c_in);
}

/// Pre-activation bottleneck: GN -> ReLU -> WS-conv, three times, plus a
/// (projected) identity shortcut.
pub fn bottleneck<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    h: &HybridConfig,
    x: &Var<T>,
    stride: usize,
) -> Result<Var<T>> {
    let tape = ctx.tape();
    let pre_act = |name: &str, v: &Var<T>| -> Result<Var<T>> {
        let groups = h.groups_for(v.shape()[0]);
        let n = nn::group_norm(ctx, &format!("{prefix}.{name}"), v, groups, h.eps)?;
        Ok(tape.relu(&n)?)
    };
    let a = pre_act("gn1", x)?;
    let shortcut = if ctx.has(&format!("{prefix}.downsample.weight")) {
        nn::ws_conv(ctx, &format!("{prefix}.downsample"), &a, stride, 0, h.eps)?
    } else {
        x.clone()
    };
    let y = nn::ws_conv(ctx, &format!("{prefix}.conv1"), &a, 1, 0, h.eps)?;
    let y = nn::ws_conv(ctx, &format!("{prefix}.conv2"), &pre_act("gn2", &y)?, stride, 1, h.eps)?;
    let y = nn::ws_conv(ctx, &format!("{prefix}.conv3"), &pre_act("gn3", &y)?, 1, 0, h.eps)?;
    Ok(tape.add(&y, &shortcut)?)
}

pub fn embed_hybrid<T: Scalar>(ctx: &Forward<T>, h: &HybridConfig, image: &Var<T>) -> Result<HybridFeatures<T>> {
    embed_hybrid_at(ctx, "encoder.hybrid", h, image)
}

pub fn embed_hybrid_at<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    h: &HybridConfig,
    image: &Var<T>,
) -> Result<HybridFeatures<T>> {
    let (height, width) = crate::encoder::image_extent(image)?;
    if height % 16 != 0 || width % 16 != 0 {
        return Err(input_err(format!("input {height}x{width} is not divisible by 16")));
    }
    let tape = ctx.tape();
    let mut x = nn::ws_conv(ctx, &format!("{prefix}.stem"), image, 2, 3, h.eps)?;
    let mut taps = Vec::with_capacity(3);
    for (s, &blocks) in h.blocks.iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 { 2 } else { 1 };
            x = bottleneck(ctx, &format!("{prefix}.stages.{s}.{b}"), h, &x, stride)?;
        }
        taps.push(x.clone());
    }
    let last = taps.pop().expect("three stages");
    let groups = h.groups_for(last.shape()[0]);
    let normed = nn::group_norm(ctx, &format!("{prefix}.norm"), &last, groups, h.eps)?;
    let tokens = FeatureMap::new(tape.relu(&normed)?)?;
    let r1 = FeatureMap::new(taps.pop().expect("stage 1"))?;
    let r0 = FeatureMap::new(taps.pop().expect("stage 0"))?;
    Ok(HybridFeatures { r0, r1, tokens })
}
