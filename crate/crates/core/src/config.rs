//! Architecture description, presets and validation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Every accepted input extent must be a multiple of the decoder stride.
pub const DECODER_STRIDE: usize = 32;

/// Resolution of the hybrid embedder's token stage.
pub const HYBRID_TOKEN_STRIDE: usize = 16;

pub const PRESETS: [&str; 6] = ["base", "large", "hybrid", "toy", "toy-seg", "toy-hybrid"];

/// A tap point feeding the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hook {
    /// Output of transformer layer `l` (1-based).
    Layer(usize),
    /// A convolutional stage of the hybrid embedder.
    Stage(ResNetStage),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResNetStage {
    /// First stage, 1/4 resolution.
    R0,
    /// Second stage, 1/8 resolution.
    R1,
}

impl ResNetStage {
    pub fn stride(self) -> usize {
        match self {
            ResNetStage::R0 => 4,
            ResNetStage::R1 => 8,
        }
    }

    pub fn index(self) -> usize {
        match self {
            ResNetStage::R0 => 0,
            ResNetStage::R1 => 1,
        }
    }
}

impl fmt::Display for Hook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hook::Layer(l) => write!(f, "{l}"),
            Hook::Stage(s) => write!(f, "{s:?}"),
        }
    }
}

/// How the readout token is folded into the patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Ignore,
    Add,
    #[default]
    Project,
}

impl std::str::FromStr for Readout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ignore" => Ok(Readout::Ignore),
            "add" => Ok(Readout::Add),
            "project" => Ok(Readout::Project),
            other => Err(format!("unknown readout mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Head {
    Depth,
    Segmentation {
        num_classes: usize,
        #[serde(default = "default_true")]
        aux: bool,
        #[serde(default = "default_aux_weight")]
        aux_weight: f64,
        #[serde(default = "default_dropout")]
        dropout: f64,
    },
}

impl Head {
    pub fn segmentation(num_classes: usize) -> Self {
        Head::Segmentation {
            num_classes,
            aux: true,
            aux_weight: default_aux_weight(),
            dropout: default_dropout(),
        }
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self, Head::Segmentation { .. })
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Head::Depth => None,
            Head::Segmentation { num_classes, .. } => Some(*num_classes),
        }
    }

    pub fn has_aux(&self) -> bool {
        matches!(self, Head::Segmentation { aux: true, .. })
    }
}

/// Convolutional stem plus three downsampling stages of pre-activation
/// bottleneck blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    pub stem_channels: usize,
    /// Output channels of the 1/4, 1/8 and 1/16 stages.
    pub widths: Vec<usize>,
    /// Bottleneck blocks per stage.
    pub blocks: Vec<usize>,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_norm_eps")]
    pub eps: f64,
}

impl HybridConfig {
    pub fn desk(stem_channels: usize, widths: [usize; 3]) -> Self {
        Self {
            stem_channels,
            widths: widths.to_vec(),
            blocks: vec![2, 2, 2],
            groups: default_groups(),
            eps: default_norm_eps(),
        }
    }

    /// Group count for a `channels`-wide norm: the configured count clamped
    /// to the channel count, then lowered until it divides it.
    pub fn groups_for(&self, channels: usize) -> usize {
        let mut g = self.groups.min(channels).max(1);
        while channels % g != 0 {
            g -= 1;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Embedder {
    #[default]
    Patch,
    Hybrid(HybridConfig),
}

/// Layer layout of the per-hook resampling stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ResampleLayout {
    /// 1x1 projection straight to `features`, then one 3x3 (transpose)
    /// convolution at `features` channels.
    #[default]
    Compact,
    /// 1x1 projection to a per-hook width, a kernel-equals-stride transpose
    /// convolution (upsampling) or strided 3x3 convolution (downsampling) at
    /// that width, then a bias-free 3x3 convolution to `features`.
    Wide { widths: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DptConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub hooks: Vec<Hook>,
    #[serde(default)]
    pub readout: Readout,
    /// Channel count of every reassembled and fused map.
    pub features: usize,
    #[serde(default = "default_scales")]
    pub scales: Vec<usize>,
    pub head: Head,
    #[serde(default)]
    pub embedder: Embedder,
    #[serde(default)]
    pub resample: ResampleLayout,
    /// Training resolution; fixes the stored position-embedding grid.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_true() -> bool {
    true
}
fn default_aux_weight() -> f64 {
    0.2
}
fn default_dropout() -> f64 {
    0.1
}
fn default_groups() -> usize {
    32
}
fn default_norm_eps() -> f64 {
    1e-5
}
fn default_name() -> String {
    "custom".to_string()
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_scales() -> Vec<usize> {
    vec![4, 8, 16, 32]
}
fn default_image_size() -> usize {
    384
}
fn default_ln_eps() -> f64 {
    1e-6
}

/// Batch-norm epsilon and running-average momentum.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl DptConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "base" => Self::base(),
            "large" => Self::large(),
            "hybrid" => Self::hybrid(),
            "toy" => Self::toy(),
            "toy-seg" => Self::toy_seg(),
            "toy-hybrid" => Self::toy_hybrid(),
            other => {
                return Err(config_err(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn base() -> Self {
        Self {
            name: "base".into(),
            patch_size: 16,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            hooks: [3, 6, 9, 12].map(Hook::Layer).to_vec(),
            readout: Readout::Project,
            features: 256,
            scales: default_scales(),
            head: Head::Depth,
            embedder: Embedder::Patch,
            resample: ResampleLayout::Wide {
                widths: vec![96, 192, 384, 768],
            },
            image_size: 384,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn large() -> Self {
        Self {
            name: "large".into(),
            embed_dim: 1024,
            layers: 24,
            heads: 16,
            hooks: [5, 12, 18, 24].map(Hook::Layer).to_vec(),
            resample: ResampleLayout::Wide {
                widths: vec![256, 512, 1024, 1024],
            },
            ..Self::base()
        }
    }

    pub fn hybrid() -> Self {
        Self {
            name: "hybrid".into(),
            hooks: vec![
                Hook::Stage(ResNetStage::R0),
                Hook::Stage(ResNetStage::R1),
                Hook::Layer(9),
                Hook::Layer(12),
            ],
            embedder: Embedder::Hybrid(HybridConfig {
                stem_channels: 64,
                widths: vec![256, 512, 1024],
                blocks: vec![3, 4, 9],
                groups: 32,
                eps: default_norm_eps(),
            }),
            resample: ResampleLayout::Wide {
                widths: vec![256, 512, 768, 768],
            },
            ..Self::base()
        }
    }

    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            patch_size: 16,
            embed_dim: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            hooks: [1, 2, 3, 4].map(Hook::Layer).to_vec(),
            readout: Readout::Project,
            features: 32,
            scales: default_scales(),
            head: Head::Depth,
            embedder: Embedder::Patch,
            resample: ResampleLayout::Compact,
            image_size: 64,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn toy_seg() -> Self {
        Self {
            name: "toy-seg".into(),
            head: Head::segmentation(4),
            ..Self::toy()
        }
    }

    pub fn toy_hybrid() -> Self {
        Self {
            name: "toy-hybrid".into(),
            hooks: vec![
                Hook::Stage(ResNetStage::R0),
                Hook::Stage(ResNetStage::R1),
                Hook::Layer(3),
                Hook::Layer(4),
            ],
            embedder: Embedder::Hybrid(HybridConfig::desk(8, [16, 32, 64])),
            ..Self::toy()
        }
    }

    /// Parses a JSON document and validates it.
    pub fn from_json(doc: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(doc).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or an inline JSON document.
    pub fn parse(document: &str) -> Result<Self> {
        let trimmed = document.trim();
        if trimmed.starts_with('{') {
            Self::from_json(trimmed)
        } else {
            let cfg = Self::preset(trimmed)?;
            cfg.validate()?;
            Ok(cfg)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self.embedder, Embedder::Hybrid(_))
    }

    pub fn hybrid_config(&self) -> Option<&HybridConfig> {
        match &self.embedder {
            Embedder::Hybrid(h) => Some(h),
            Embedder::Patch => None,
        }
    }

    /// Pixel stride of one token.
    pub fn token_stride(&self) -> usize {
        match self.embedder {
            Embedder::Patch => self.patch_size,
            Embedder::Hybrid(_) => HYBRID_TOKEN_STRIDE,
        }
    }

    /// Position-embedding grid stored in the weights.
    pub fn base_grid(&self) -> (usize, usize) {
        let g = self.image_size / self.token_stride();
        (g, g)
    }

    /// Pixel stride of the representation tapped at `hook`.
    pub fn hook_stride(&self, hook: Hook) -> usize {
        match hook {
            Hook::Layer(_) => self.token_stride(),
            Hook::Stage(s) => s.stride(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn uses_batch_norm(&self) -> bool {
        self.head.is_segmentation()
    }

    /// Deepest transformer layer tapped by a hook.
    pub fn max_layer_hook(&self) -> usize {
        self.hooks
            .iter()
            .filter_map(|h| match h {
                Hook::Layer(l) => Some(*l),
                Hook::Stage(_) => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(config_err(msg));
        if self.patch_size == 0 || self.embed_dim == 0 || self.layers == 0 || self.heads == 0 {
            return bad("patch_size, embed_dim, layers and heads must be positive".into());
        }
        if self.mlp_ratio == 0 || self.features == 0 {
            return bad("mlp_ratio and features must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.hooks.len() != 4 {
            return bad(format!("expected exactly 4 hooks, got {}", self.hooks.len()));
        }
        if self.scales.len() != 4 {
            return bad(format!("expected exactly 4 scales, got {}", self.scales.len()));
        }
        for w in self.scales.windows(2) {
            if w[0] >= w[1] {
                return bad(format!("scales must be strictly increasing: {:?}", self.scales));
            }
        }
        for &s in &self.scales {
            if ![4, 8, 16, 32].contains(&s) {
                return bad(format!("scale {s} not in {{4, 8, 16, 32}}"));
            }
        }
        if DECODER_STRIDE % self.token_stride() != 0 {
            return bad(format!(
                "token stride {} must divide the decoder stride {DECODER_STRIDE}",
                self.token_stride()
            ));
        }
        if self.image_size == 0 || self.image_size % DECODER_STRIDE != 0 {
            return bad(format!(
                "image_size {} is not divisible by {DECODER_STRIDE}",
                self.image_size
            ));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return bad("ln_eps must be a non-negative finite number".into());
        }

        let mut seen_layer = false;
        let mut last_layer = 0;
        let mut last_stage: Option<usize> = None;
        for hook in &self.hooks {
            match *hook {
                Hook::Layer(l) => {
                    if l == 0 || l > self.layers {
                        return bad(format!("hook layer {l} outside [1, {}]", self.layers));
                    }
                    if l <= last_layer {
                        return bad(format!("hook layers must be strictly ascending: {:?}", self.hooks));
                    }
                    last_layer = l;
                    seen_layer = true;
                }
                Hook::Stage(s) => {
                    if !self.is_hybrid() {
                        return bad(format!("hook {s:?} requires the hybrid embedder"));
                    }
                    if seen_layer || last_stage.is_some_and(|p| p >= s.index()) {
                        return bad("stage hooks must precede layer hooks, R0 before R1".into());
                    }
                    last_stage = Some(s.index());
                }
            }
        }

        for (i, (&hook, &s)) in self.hooks.iter().zip(&self.scales).enumerate() {
            let src = self.hook_stride(hook);
            if !(s % src == 0 || src % s == 0) {
                return bad(format!(
                    "hook {i}: scale {s} and source stride {src} are not integer multiples"
                ));
            }
        }

        if let ResampleLayout::Wide { widths } = &self.resample {
            if widths.len() != 4 || widths.contains(&0) {
                return bad(format!("resample widths must be 4 positive values, got {widths:?}"));
            }
        }

        if let Embedder::Hybrid(h) = &self.embedder {
            if h.widths.len() != 3 || h.blocks.len() != 3 {
                return bad("hybrid widths and blocks must each list 3 stages".into());
            }
            if h.stem_channels == 0 || h.widths.contains(&0) || h.blocks.contains(&0) {
                return bad("hybrid channel and block counts must be positive".into());
            }
            if h.widths.iter().any(|w| w % 4 != 0) {
                return bad("hybrid stage widths must be divisible by 4 (bottleneck)".into());
            }
            if h.groups == 0 {
                return bad("hybrid groups must be positive".into());
            }
        }

        match &self.head {
            Head::Depth => {
                if self.features < 2 {
                    return bad("depth head needs at least 2 features".into());
                }
            }
            Head::Segmentation {
                num_classes,
                aux_weight,
                dropout,
                ..
            } => {
                if *num_classes == 0 {
                    return bad("num_classes must be positive".into());
                }
                if !(0.0..1.0).contains(dropout) {
                    return bad(format!("dropout {dropout} outside [0, 1)"));
                }
                if !(aux_weight.is_finite() && *aux_weight >= 0.0) {
                    return bad(format!("aux_weight {aux_weight} must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Checks a runtime input extent.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % DECODER_STRIDE != 0 || w % DECODER_STRIDE != 0 {
            return Err(crate::error::input_err(format!(
                "input {h}x{w} is not divisible by {DECODER_STRIDE}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            DptConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn hook_serde_forms() {
        let hooks: Vec<Hook> = serde_json::from_str(r#"["R0", "R1", 9, 12]"#).unwrap();
        assert_eq!(hooks[0], Hook::Stage(ResNetStage::R0));
        assert_eq!(hooks[3], Hook::Layer(12));
    }

    #[test]
    fn group_clamping() {
        let h = HybridConfig::desk(8, [16, 32, 64]);
        assert_eq!(h.groups_for(8), 8);
        assert_eq!(h.groups_for(64), 32);
        assert_eq!(h.groups_for(24), 24);
        assert_eq!(h.groups_for(48), 24);
    }
}
