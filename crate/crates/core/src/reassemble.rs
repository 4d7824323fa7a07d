//! Tokens to image-like feature maps: read, concatenate, resample.

use dpt_tensor::{Scalar, Tape, Var};

use crate::config::{DptConfig, Hook, Readout, ResNetStage, ResampleLayout};
use crate::encoder::{HookOutput, TokenSet};
use crate::error::{input_err, Result};
use crate::feature::FeatureMap;
use crate::nn::{self, Forward};
use crate::params::Plan;

/// Geometry of one reassemble stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReassembleSpec {
    /// Output size ratio `s`: the map ends up at `1/s` of the input.
    pub scale: usize,
    /// Pixel stride of the incoming representation (`p` for tokens).
    pub source_stride: usize,
    /// Output channels.
    pub features: usize,
    pub readout: Readout,
    /// Intermediate width of the wide layout; `None` for the compact one.
    pub width: Option<usize>,
}

impl ReassembleSpec {
    pub fn for_hook(cfg: &DptConfig, i: usize) -> Self {
        Self {
            scale: cfg.scales[i],
            source_stride: cfg.hook_stride(cfg.hooks[i]),
            features: cfg.features,
            readout: cfg.readout,
            width: match &cfg.resample {
                ResampleLayout::Compact => None,
                ResampleLayout::Wide { widths } => Some(widths[i]),
            },
        }
    }
}

/// Channels entering the projection stage of hook `i`.
pub fn input_channels(cfg: &DptConfig, i: usize) -> usize {
    match (cfg.hooks[i], cfg.hybrid_config()) {
        (Hook::Stage(ResNetStage::R0), Some(h)) => h.widths[0],
        (Hook::Stage(ResNetStage::R1), Some(h)) => h.widths[1],
        _ => cfg.embed_dim,
    }
}

pub fn plan(plan: &mut Plan, cfg: &DptConfig) {
    for i in 0..cfg.hooks.len() {
        let prefix = format!("reassemble.{i}");
        let spec = ReassembleSpec::for_hook(cfg, i);
        if matches!(cfg.hooks[i], Hook::Layer(_)) && cfg.readout == Readout::Project {
            let d = cfg.embed_dim;
            plan.linear(&format!("{prefix}.readout_proj"), 2 * d, d, true);
        }
        plan_resample(plan, &prefix, input_channels(cfg, i), &spec);
    }
}

pub fn plan_resample(plan: &mut Plan, prefix: &str, c_in: usize, spec: &ReassembleSpec) {
    let (s, src, f) = (spec.scale, spec.source_stride, spec.features);
    match spec.width {
        None => {
            plan.conv(&format!("{prefix}.proj"), c_in, f, 1, true);
            if s < src {
                plan.conv_transpose(&format!("{prefix}.resample"), f, f, 3, true);
            } else {
                plan.conv(&format!("{prefix}.resample"), f, f, 3, true);
            }
        }
        Some(w) => {
            plan.conv(&format!("{prefix}.proj"), c_in, w, 1, true);
            if s < src {
                plan.conv_transpose(&format!("{prefix}.resample"), w, w, src / s, true);
            } else if s > src {
                plan.conv(&format!("{prefix}.resample"), w, w, 3, true);
            }
            plan.conv(&format!("{prefix}.out"), w, f, 3, false);
        }
    }
}

/// Folds the readout token into the patch tokens, returning `N_p x D` rows.
pub fn read<T: Scalar>(ctx: &Forward<T>, prefix: &str, t: &TokenSet<T>, mode: Readout) -> Result<Var<T>> {
    let tape = ctx.tape();
    let n = t.num_tokens();
    let patches = tape.slice_rows(&t.tokens, 1, n)?;
    match mode {
        Readout::Ignore => Ok(patches),
        Readout::Add => {
            let readout = tape.broadcast_rows(&tape.slice_rows(&t.tokens, 0, 1)?, n - 1)?;
            Ok(tape.add(&patches, &readout)?)
        }
        Readout::Project => {
            let readout = tape.broadcast_rows(&tape.slice_rows(&t.tokens, 0, 1)?, n - 1)?;
            let cat = tape.concat_cols(&[&patches, &readout])?;
            let y = nn::linear(ctx, &format!("{prefix}.readout_proj"), &cat)?;
            Ok(tape.gelu(&y)?)
        }
    }
}

/// Places row `y * w_p + x` of `N_p x D` rows at pixel `(y, x)` of a
/// `D x h_p x w_p` map.
pub fn concatenate_tokens<T: Scalar>(tape: &Tape<T>, rows: &Var<T>, grid: (usize, usize)) -> Result<FeatureMap<T>> {
    let shape = rows.shape();
    if shape.len() != 2 || shape[0] != grid.0 * grid.1 {
        return Err(input_err(format!(
            "{shape:?} rows cannot fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let t = tape.transpose(rows)?;
    FeatureMap::new(tape.reshape(&t, &[shape[1], grid.0, grid.1])?)
}

/// 1x1 projection followed by the spatial stage that brings a map at
/// `1/source_stride` to `1/scale` resolution.
pub fn resample<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    f: &FeatureMap<T>,
    spec: &ReassembleSpec,
) -> Result<FeatureMap<T>> {
    let (s, src) = (spec.scale, spec.source_stride);
    if ![4, 8, 16, 32].contains(&s) {
        return Err(input_err(format!("scale {s} not in {{4, 8, 16, 32}}")));
    }
    if !(s % src == 0 || src % s == 0) {
        return Err(input_err(format!("scale {s} and stride {src} have no integer ratio")));
    }
    if s > src {
        let r = s / src;
        if f.height() % r != 0 || f.width() % r != 0 {
            return Err(input_err(format!(
                "{}x{} map cannot be downsampled by {r}",
                f.height(),
                f.width()
            )));
        }
    }
    let x = nn::conv(ctx, &format!("{prefix}.proj"), &f.data, 1, 0)?;
    let rs = format!("{prefix}.resample");
    let y = match spec.width {
        None => {
            if s < src {
                let r = src / s;
                nn::conv_transpose(ctx, &rs, &x, r, 1, r - 1)?
            } else {
                nn::conv(ctx, &rs, &x, s / src, 1)?
            }
        }
        Some(_) => {
            let y = if s < src {
                nn::conv_transpose(ctx, &rs, &x, src / s, 0, 0)?
            } else if s > src {
                nn::conv(ctx, &rs, &x, s / src, 1)?
            } else {
                x
            };
            nn::conv(ctx, &format!("{prefix}.out"), &y, 1, 1)?
        }
    };
    FeatureMap::new(y)
}

/// Reassembles one hooked representation.
pub fn reassemble<T: Scalar>(ctx: &Forward<T>, cfg: &DptConfig, i: usize, hook: &HookOutput<T>) -> Result<FeatureMap<T>> {
    let prefix = format!("reassemble.{i}");
    let spec = ReassembleSpec::for_hook(cfg, i);
    let map = match hook {
        HookOutput::Tokens(t) => {
            let rows = read(ctx, &prefix, t, cfg.readout)?;
            concatenate_tokens(ctx.tape(), &rows, t.grid)?
        }
        HookOutput::Map(m) => m.clone(),
    };
    resample(ctx, &prefix, &map, &spec)
}

pub fn reassemble_all<T: Scalar>(ctx: &Forward<T>, cfg: &DptConfig, hooks: &[HookOutput<T>]) -> Result<Vec<FeatureMap<T>>> {
    if hooks.len() != cfg.hooks.len() {
        return Err(input_err(format!("expected {} hooks, got {}", cfg.hooks.len(), hooks.len())));
    }
    hooks
        .iter()
        .enumerate()
        .map(|(i, h)| reassemble(ctx, cfg, i, h))
        .collect()
}
