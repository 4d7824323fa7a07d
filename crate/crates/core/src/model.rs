//! The assembled network: encoder, reassemble, fusion decoder and head.

use dpt_tensor::{Scalar, Tape, Tensor, Var};

use crate::config::{DptConfig, Head};
use crate::encoder::{self, HookOutput};
use crate::error::{input_err, Result};
use crate::feature::FeatureMap;
use crate::fusion::{self, Decoded};
use crate::heads;
use crate::nn::{Forward, Mode};
use crate::params::{ParamStore, Plan};
use crate::reassemble;

/// Every tensor the configured network owns, in archive order.
pub fn plan(cfg: &DptConfig) -> Plan {
    let mut plan = Plan::new();
    encoder::plan(&mut plan, cfg);
    reassemble::plan(&mut plan, cfg);
    fusion::plan(&mut plan, cfg);
    heads::plan(&mut plan, cfg);
    plan
}

/// Learnable parameter count without materializing any weights.
pub fn count_parameters(cfg: &DptConfig) -> usize {
    plan(cfg).num_learnable()
}

/// Intermediate and final values of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs<T: Scalar> {
    pub hooks: Vec<HookOutput<T>>,
    pub reassembled: Vec<FeatureMap<T>>,
    pub decoded: Decoded<T>,
    /// `1 x H x W` inverse depth (depth head).
    pub depth: Option<Var<T>>,
    /// `classes x H x W` logits (segmentation head).
    pub logits: Option<Var<T>>,
    pub aux_logits: Option<Var<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<T: Scalar> {
    /// `H x W` non-negative inverse depth.
    Depth(Tensor<T>),
    Segmentation {
        /// `classes x H x W`.
        logits: Tensor<T>,
        /// Row-major per-pixel argmax.
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dpt<T: Scalar> {
    cfg: DptConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Dpt<T> {
    /// Freshly initialized weights, deterministic in `seed`.
    pub fn new(cfg: DptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = plan(&cfg).initialize(seed);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: DptConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_against(&plan(&cfg))?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DptConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn plan(&self) -> Plan {
        plan(&self.cfg)
    }

    /// Binds the weights to `tape` for one pass.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, mode: Mode, seed: u64) -> Forward<'t, T> {
        Forward::new(tape, &self.params, mode, seed)
    }

    /// Full forward pass of a `3 x H x W` image.
    pub fn forward(&self, ctx: &Forward<T>, image: &Var<T>) -> Result<Outputs<T>> {
        forward(ctx, &self.cfg, image)
    }

    /// Eval-mode prediction on an untracked tape.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let tape = Tape::inference();
        let ctx = self.bind(&tape, Mode::Eval, 0);
        let out = self.forward(&ctx, &tape.constant(image.clone()))?;
        prediction(out)
    }

    /// Writes queued batch-norm statistics back into the store.
    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, t) in updates {
            self.params.set(&name, t)?;
        }
        Ok(())
    }
}

fn prediction<T: Scalar>(out: Outputs<T>) -> Result<Prediction<T>> {
    if let Some(d) = out.depth {
        let s = d.shape().to_vec();
        return Ok(Prediction::Depth(d.into_value().reshape(&s[1..])?));
    }
    let logits = out
        .logits
        .ok_or_else(|| input_err("forward produced no prediction"))?
        .into_value();
    let labels = argmax_channels(&logits);
    Ok(Prediction::Segmentation { logits, labels })
}

/// Per-pixel argmax over the leading axis of a `C x H x W` tensor.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[0];
    let plane = logits.numel() / c;
    let d = logits.data();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * plane + i] > d[best * plane + i] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn forward<T: Scalar>(ctx: &Forward<T>, cfg: &DptConfig, image: &Var<T>) -> Result<Outputs<T>> {
    let (h, w) = encoder::image_extent(image)?;
    cfg.check_input(h, w)?;
    let hooks = encoder::encode(ctx, cfg, image)?;
    let reassembled = reassemble::reassemble_all(ctx, cfg, &hooks)?;
    let use_bn = cfg.uses_batch_norm();
    let decoded = fusion::decode(ctx, &reassembled, use_bn)?;
    let (mut depth, mut logits, mut aux_logits) = (None, None, None);
    match &cfg.head {
        Head::Depth => {
            depth = Some(heads::depth_head(ctx, "head", &decoded.output, (h, w))?);
        }
        Head::Segmentation { aux, dropout, .. } => {
            logits = Some(heads::segmentation_head(ctx, "head", &decoded.output, *dropout, (h, w))?);
            if *aux {
                aux_logits = Some(heads::segmentation_head(ctx, "aux", &decoded.penultimate, *dropout, (h, w))?);
            }
        }
    }
    Ok(Outputs {
        hooks,
        reassembled,
        decoded,
        depth,
        logits,
        aux_logits,
    })
}

/// Masked mean-squared error of the depth prediction against an `H x W`
/// target.
pub fn depth_loss<T: Scalar>(tape: &Tape<T>, out: &Outputs<T>, target: &Tensor<T>, mask: &[bool]) -> Result<Var<T>> {
    let depth = out.depth.as_ref().ok_or_else(|| input_err("model has no depth head"))?;
    let pred = tape.reshape(depth, target.shape())?;
    Ok(tape.masked_mse(&pred, &tape.constant(target.clone()), mask)?)
}

/// Cross-entropy of the main logits plus `aux_weight` times the auxiliary
/// cross-entropy; `None` labels are ignored.
pub fn segmentation_loss<T: Scalar>(
    tape: &Tape<T>,
    out: &Outputs<T>,
    labels: &[Option<usize>],
    aux_weight: f64,
) -> Result<Var<T>> {
    let logits = out.logits.as_ref().ok_or_else(|| input_err("model has no segmentation head"))?;
    let main = tape.cross_entropy(logits, labels)?;
    let aux = match &out.aux_logits {
        Some(a) => Some(tape.cross_entropy(a, labels)?),
        None => None,
    };
    heads::combined_loss(tape, &main, aux.as_ref(), aux_weight)
}
