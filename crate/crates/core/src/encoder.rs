//! Patch embedding, readout token, position embeddings and the transformer
//! stack with hookable layer outputs.

use dpt_tensor::{Scalar, Tape, Var};

use crate::config::{DptConfig, Embedder, Hook};
use crate::error::{input_err, Result};
use crate::feature::FeatureMap;
use crate::hybrid;
use crate::nn::{self, Forward};
use crate::params::{Init, Plan};

pub const READOUT_INDEX: usize = 0;

/// `(N_p + 1) x D` tokens; row 0 is the readout token.
#[derive(Debug, Clone)]
pub struct TokenSet<T: Scalar> {
    pub tokens: Var<T>,
    /// Patch grid `(h_p, w_p)`, `N_p = h_p * w_p`.
    pub grid: (usize, usize),
    /// Transformer layer that produced the set; 0 for the embedding.
    pub layer: usize,
}

impl<T: Scalar> TokenSet<T> {
    pub fn new(tokens: Var<T>, grid: (usize, usize), layer: usize) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != grid.0 * grid.1 + 1 {
            return Err(input_err(format!(
                "token matrix {shape:?} does not match grid {}x{} plus readout",
                grid.0, grid.1
            )));
        }
        Ok(Self { tokens, grid, layer })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// A decoder input: hooked tokens or a convolutional feature map.
#[derive(Debug, Clone)]
pub enum HookOutput<T: Scalar> {
    Tokens(TokenSet<T>),
    Map(FeatureMap<T>),
}

pub fn plan(plan: &mut Plan, cfg: &DptConfig) {
    let d = cfg.embed_dim;
    match &cfg.embedder {
        Embedder::Patch => {
            let p = cfg.patch_size;
            plan.conv("encoder.patch_embed", 3, d, p, true);
        }
        Embedder::Hybrid(h) => {
            hybrid::plan(plan, "encoder.hybrid", h);
            plan.conv("encoder.patch_embed", h.widths[2], d, 1, true);
        }
    }
    let (gh, gw) = cfg.base_grid();
    plan.param("encoder.cls_token", &[1, d], Init::TruncNormal(0.02));
    plan.param("encoder.pos_embed", &[gh * gw + 1, d], Init::TruncNormal(0.02));
    for l in 0..cfg.layers {
        plan_layer(plan, &format!("encoder.layers.{l}"), d, cfg.mlp_ratio);
    }
}

pub fn plan_layer(plan: &mut Plan, prefix: &str, d: usize, mlp_ratio: usize) {
    plan.norm(&format!("{prefix}.norm1"), d);
    plan.linear(&format!("{prefix}.attn.qkv"), d, 3 * d, true);
    plan.linear(&format!("{prefix}.attn.proj"), d, d, true);
    plan.norm(&format!("{prefix}.norm2"), d);
    plan.linear(&format!("{prefix}.mlp.fc1"), d, mlp_ratio * d, true);
    plan.linear(&format!("{prefix}.mlp.fc2"), mlp_ratio * d, d, true);
}

/// `C x h x w` map to `hw x C` rows, row-major over the grid.
pub fn flatten_map<T: Scalar>(tape: &Tape<T>, map: &Var<T>) -> Result<Var<T>> {
    let s = map.shape();
    let rows = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    Ok(tape.transpose(&rows)?)
}

/// Resizes the patch rows of a position embedding from `src` to `dst`
/// grid extents; the readout row passes through unchanged.
pub fn interpolate_pos_embed<T: Scalar>(
    tape: &Tape<T>,
    pos: &Var<T>,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<Var<T>> {
    let shape = pos.shape();
    if shape.len() != 2 || shape[0] != src.0 * src.1 + 1 {
        return Err(input_err(format!(
            "position embedding {shape:?} does not match grid {}x{} plus readout",
            src.0, src.1
        )));
    }
    if dst.0 == 0 || dst.1 == 0 {
        return Err(input_err("empty destination grid"));
    }
    let d = shape[1];
    let n = shape[0];
    let readout = tape.slice_rows(pos, 0, 1)?;
    let patches = tape.slice_rows(pos, 1, n)?;
    let map = tape.reshape(&tape.transpose(&patches)?, &[d, src.0, src.1])?;
    let resized = tape.bilinear_resize(&map, dst.0, dst.1)?;
    let rows = flatten_map(tape, &resized)?;
    Ok(tape.concat_rows(&[&readout, &rows])?)
}

/// Prepends the readout token and adds (interpolated) position embeddings to
/// `N_p x D` patch embeddings.
fn add_readout_and_position<T: Scalar>(
    ctx: &Forward<T>,
    cfg: &DptConfig,
    patches: &Var<T>,
    grid: (usize, usize),
) -> Result<TokenSet<T>> {
    let tape = ctx.tape();
    let cls = ctx.p("encoder.cls_token")?;
    let tokens = tape.concat_rows(&[&cls, patches])?;
    let pos = interpolate_pos_embed(tape, &ctx.p("encoder.pos_embed")?, cfg.base_grid(), grid)?;
    TokenSet::new(tape.add(&tokens, &pos)?, grid, 0)
}

/// Splits a `3 x H x W` image into `p x p` patches, projects each to `D`
/// and prepends the readout token.
pub fn embed_patches<T: Scalar>(ctx: &Forward<T>, cfg: &DptConfig, image: &Var<T>) -> Result<TokenSet<T>> {
    let (h, w) = image_extent(image)?;
    let p = cfg.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(input_err(format!("input {h}x{w} is not divisible by patch size {p}")));
    }
    let map = nn::conv(ctx, "encoder.patch_embed", image, p, 0)?;
    let rows = flatten_map(ctx.tape(), &map)?;
    add_readout_and_position(ctx, cfg, &rows, (h / p, w / p))
}

pub(crate) fn image_extent<T: Scalar>(image: &Var<T>) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        other => Err(input_err(format!("expected a 3 x H x W image, got {other:?}"))),
    }
}

/// Multi-head scaled dot-product self-attention over `N x D` rows.
pub fn mhsa<T: Scalar>(ctx: &Forward<T>, prefix: &str, x: &Var<T>, heads: usize) -> Result<Var<T>> {
    let tape = ctx.tape();
    let d = x.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(input_err(format!("dimension {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qkv = nn::linear(ctx, &format!("{prefix}.qkv"), x)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(&qkv, h * dh, (h + 1) * dh)?;
        let k = tape.slice_cols(&qkv, d + h * dh, d + (h + 1) * dh)?;
        let v = tape.slice_cols(&qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
        let scores = tape.scale(&tape.matmul(&q, &tape.transpose(&k)?)?, scale)?;
        let attn = tape.softmax(&scores)?;
        outs.push(tape.matmul(&attn, &v)?);
    }
    let refs: Vec<&Var<T>> = outs.iter().collect();
    let merged = if heads == 1 { outs[0].clone() } else { tape.concat_cols(&refs)? };
    nn::linear(ctx, &format!("{prefix}.proj"), &merged)
}

/// Pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(.))`.
pub fn transformer_layer<T: Scalar>(
    ctx: &Forward<T>,
    prefix: &str,
    x: &Var<T>,
    heads: usize,
    eps: f64,
) -> Result<Var<T>> {
    let tape = ctx.tape();
    let h = nn::layer_norm(ctx, &format!("{prefix}.norm1"), x, eps)?;
    let x = tape.add(x, &mhsa(ctx, &format!("{prefix}.attn"), &h, heads)?)?;
    let h = nn::layer_norm(ctx, &format!("{prefix}.norm2"), &x, eps)?;
    let h = nn::linear(ctx, &format!("{prefix}.mlp.fc1"), &h)?;
    let h = tape.gelu(&h)?;
    let h = nn::linear(ctx, &format!("{prefix}.mlp.fc2"), &h)?;
    Ok(tape.add(&x, &h)?)
}

/// Embeds the image and runs the transformer stack, returning the four
/// hooked representations shallow to deep.
pub fn encode<T: Scalar>(ctx: &Forward<T>, cfg: &DptConfig, image: &Var<T>) -> Result<Vec<HookOutput<T>>> {
    let (mut tokens, stages) = match &cfg.embedder {
        Embedder::Patch => (embed_patches(ctx, cfg, image)?, Vec::new()),
        Embedder::Hybrid(h) => {
            let emb = hybrid::embed_hybrid(ctx, h, image)?;
            let grid = (emb.tokens.height(), emb.tokens.width());
            let proj = nn::conv(ctx, "encoder.patch_embed", &emb.tokens.data, 1, 0)?;
            let rows = flatten_map(ctx.tape(), &proj)?;
            let set = add_readout_and_position(ctx, cfg, &rows, grid)?;
            (set, vec![emb.r0, emb.r1])
        }
    };

    let mut out: Vec<Option<HookOutput<T>>> = vec![None; cfg.hooks.len()];
    for (i, hook) in cfg.hooks.iter().enumerate() {
        if let Hook::Stage(s) = hook {
            out[i] = Some(HookOutput::Map(stages[s.index()].clone()));
        }
    }
    for l in 1..=cfg.max_layer_hook() {
        let next = transformer_layer(ctx, &format!("encoder.layers.{}", l - 1), &tokens.tokens, cfg.heads, cfg.ln_eps)?;
        tokens = TokenSet::new(next, tokens.grid, l)?;
        if let Some(i) = cfg.hooks.iter().position(|h| *h == Hook::Layer(l)) {
            out[i] = Some(HookOutput::Tokens(tokens.clone()));
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every hook is filled")).collect())
}
