//! Forward-pass context and the layer primitives built on it.

use std::cell::RefCell;
use std::collections::HashMap;

use dpt_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BN_EPS, BN_MOMENTUM};
use crate::error::{DptError, Result};
use crate::params::{Kind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Running batch-norm statistics, no dropout.
    #[default]
    Eval,
    /// Per-image batch-norm statistics and seeded dropout.
    Train,
}

/// Binds every named parameter to a tape value for one forward pass.
///
/// Learnable tensors become tape leaves, buffers become constants. Batch-norm
/// running-statistic updates are collected rather than applied, so the store
/// itself is never mutated during a pass.
pub struct Forward<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: HashMap<String, Var<T>>,
    mode: Mode,
    rng: RefCell<ChaCha8Rng>,
    bn_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'t, T: Scalar> Forward<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, mode: Mode, seed: u64) -> Self {
        let vars = store
            .iter()
            .map(|(name, t, kind)| {
                let v = match kind {
                    Kind::Learnable => tape.leaf(t.clone()),
                    Kind::Buffer => tape.constant(t.clone()),
                };
                (name.to_string(), v)
            })
            .collect();
        Self::from_vars(tape, vars, mode, seed)
    }

    /// Uses caller-provided bindings, e.g. leaves created by a gradient check.
    pub fn from_vars(tape: &'t Tape<T>, vars: HashMap<String, Var<T>>, mode: Mode, seed: u64) -> Self {
        Self {
            tape,
            vars,
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn p(&self, name: &str) -> Result<Var<T>> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| DptError::MissingParam(name.to_string()))
    }

    pub fn var(&self, name: &str) -> Option<&Var<T>> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &HashMap<String, Var<T>> {
        &self.vars
    }

    fn optional(&self, name: &str) -> Option<Var<T>> {
        self.vars.get(name).cloned()
    }

    pub fn take_bn_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    fn uniform(&self) -> f64 {
        self.rng.borrow_mut().gen::<f64>()
    }
}

/// `x [N, in] -> [N, out]`.
pub fn linear<T: Scalar>(ctx: &Forward<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let tape = ctx.tape();
    let y = tape.matmul(x, &ctx.p(&format!("{prefix}.weight"))?)?;
    match ctx.optional(&format!("{prefix}.bias")) {
        Some(b) => Ok(tape.add_bias(&y, &b)?),
        None => Ok(y),
    }
}

pub fn conv<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    x: &Var<T>,
    stride: usize,
    pad: usize,
) -> Result<Var<T>> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    let b = ctx.optional(&format!("{prefix}.bias"));
    Ok(ctx.tape().conv2d(x, &w, b.as_ref(), stride, pad)?)
}

/// Convolution with a standardized copy of the stored filter.
pub fn ws_conv<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    x: &Var<T>,
    stride: usize,
    pad: usize,
    eps: f64,
) -> Result<Var<T>> {
    let tape = ctx.tape();
    let w = tape.weight_standardize(&ctx.p(&format!("{prefix}.weight"))?, T::lit(eps))?;
    let b = ctx.optional(&format!("{prefix}.bias"));
    Ok(tape.conv2d(x, &w, b.as_ref(), stride, pad)?)
}

pub fn conv_transpose<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    x: &Var<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Var<T>> {
    let w = ctx.p(&format!("{prefix}.weight"))?;
    let b = ctx.optional(&format!("{prefix}.bias"));
    Ok(ctx
        .tape()
        .conv_transpose2d(x, &w, b.as_ref(), stride, pad, out_pad)?)
}

pub fn layer_norm<T: Scalar>(ctx: &Forward<T>, prefix: &str, x: &Var<T>, eps: f64) -> Result<Var<T>> {
    Ok(ctx.tape().layer_norm(
        x,
        &ctx.p(&format!("{prefix}.weight"))?,
        &ctx.p(&format!("{prefix}.bias"))?,
        T::lit(eps),
    )?)
}

pub fn group_norm<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    x: &Var<T>,
    groups: usize,
    eps: f64,
) -> Result<Var<T>> {
    Ok(ctx.tape().group_norm(
        x,
        groups,
        &ctx.p(&format!("{prefix}.weight"))?,
        &ctx.p(&format!("{prefix}.bias"))?,
        T::lit(eps),
    )?)
}

/// Batch norm over a single `C x H x W` image.
///
/// Training mode normalizes with the image's own per-channel statistics
/// (group norm with one group per channel) and queues a running-average
/// update; eval mode applies the stored running statistics.
pub fn batch_norm<T: Scalar>(ctx: &Forward<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let tape = ctx.tape();
    let gamma = ctx.p(&format!("{prefix}.weight"))?;
    let beta = ctx.p(&format!("{prefix}.bias"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let running_mean = ctx.p(&mean_name)?;
    let running_var = ctx.p(&var_name)?;
    let c = x.shape()[0];
    match ctx.mode() {
        Mode::Train => {
            let y = tape.group_norm(x, c, &gamma, &beta, T::lit(BN_EPS))?;
            let (mean, var) = channel_stats(x.value());
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            let new_mean = running_mean.value().zip_map(&mean, |r, b| keep * r + m * b)?;
            let new_var = running_var.value().zip_map(&var, |r, b| keep * r + m * b)?;
            let mut updates = ctx.bn_updates.borrow_mut();
            updates.push((mean_name, new_mean));
            updates.push((var_name, new_var));
            Ok(y)
        }
        Mode::Eval => {
            let inv_std = running_var.value().map(|v| T::one() / (v + T::lit(BN_EPS)).sqrt());
            let scale = tape.mul(&gamma, &tape.constant(inv_std))?;
            let shifted = tape.mul(&scale, &tape.constant(running_mean.value().clone()))?;
            let shift = tape.sub(&beta, &shifted)?;
            Ok(tape.channel_affine(x, &scale, &shift)?)
        }
    }
}

/// Per-channel mean and unbiased variance of a `C x H x W` tensor.
fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let c = x.shape()[0];
    let plane = x.numel() / c;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in x.data().chunks(plane) {
        let n = T::lit(plane as f64);
        let mean = ch.iter().fold(T::zero(), |a, &v| a + v) / n;
        let ss = ch.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
        let denom = if plane > 1 { T::lit((plane - 1) as f64) } else { T::one() };
        means.push(mean);
        vars.push(ss / denom);
    }
    (
        Tensor::new(&[c], means).expect("channel count"),
        Tensor::new(&[c], vars).expect("channel count"),
    )
}

/// Inverted dropout; the identity outside training mode.
pub fn dropout<T: Scalar>(ctx: &Forward<T>, x: &Var<T>, rate: f64) -> Result<Var<T>> {
    if ctx.mode() == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(x.shape(), |_| {
        if ctx.uniform() < rate {
            T::zero()
        } else {
            keep
        }
    });
    Ok(ctx.tape().mul(x, &ctx.tape().constant(mask))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Plan;

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let tape = Tape::<f64>::inference();
        let store = ParamStore::default();
        let x = tape.constant(Tensor::ones(&[4, 8, 8]));
        let eval = Forward::new(&tape, &store, Mode::Eval, 1);
        assert_eq!(dropout(&eval, &x, 0.5).unwrap().value(), x.value());

        let a = Forward::new(&tape, &store, Mode::Train, 1);
        let b = Forward::new(&tape, &store, Mode::Train, 1);
        let ya = dropout(&a, &x, 0.5).unwrap();
        let yb = dropout(&b, &x, 0.5).unwrap();
        assert_eq!(ya.value(), yb.value());
        assert!(ya.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(ya.value().data().contains(&0.0));
    }

    #[test]
    fn batch_norm_modes() {
        let mut plan = Plan::new();
        plan.batch_norm("bn", 2);
        let store = plan.initialize::<f64>(0);
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::new(&[2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap());

        let train = Forward::new(&tape, &store, Mode::Train, 0);
        let y = batch_norm(&train, "bn", &x).unwrap();
        for v in y.value().data() {
            assert!((v.abs() - 1.0).abs() < 1e-4);
        }
        let updates = train.take_bn_updates();
        assert_eq!(updates.len(), 2);
        // mean 2 and 0; unbiased variance 2 and 8.
        assert!(updates[0].1.allclose(&Tensor::new(&[2], vec![0.2, 0.0]).unwrap(), 1e-12));
        assert!(updates[1].1.allclose(&Tensor::new(&[2], vec![1.1, 1.7]).unwrap(), 1e-12));

        // Fresh running stats (mean 0, var 1): eval is nearly the identity.
        let eval = Forward::new(&tape, &store, Mode::Eval, 0);
        let y = batch_norm(&eval, "bn", &x).unwrap();
        assert!(y.value().allclose(x.value(), 1e-4));
    }
}
