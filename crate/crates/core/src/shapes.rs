//! Analytic shape, parameter and FLOP report for a configuration, computed
//! without building or running the network.
//!
//! FLOPs count two per multiply-accumulate in convolutions, linear layers
//! and attention products; elementwise work, normalization and resizing
//! are not counted.

use std::fmt;

use serde::Serialize;

use crate::config::{DptConfig, Head, Hook};
use crate::error::Result;
use crate::heads::DEPTH_HIDDEN;
use crate::model;
use crate::reassemble::{input_channels, ReassembleSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamGroup {
    pub name: String,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeReport {
    pub config: String,
    pub input: (usize, usize),
    pub grid: (usize, usize),
    /// Patch tokens, readout excluded.
    pub patch_tokens: usize,
    pub stages: Vec<Stage>,
    pub groups: Vec<ParamGroup>,
    pub total_params: usize,
    pub flops: u64,
}

impl ShapeReport {
    pub fn stage(&self, name: &str) -> Option<&[usize]> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.shape.as_slice())
    }
}

fn conv(c_in: usize, c_out: usize, k: usize, out_hw: (usize, usize)) -> u64 {
    2 * (c_in * c_out * k * k * out_hw.0 * out_hw.1) as u64
}

fn conv_t(c_in: usize, c_out: usize, k: usize, in_hw: (usize, usize)) -> u64 {
    2 * (c_in * c_out * k * k * in_hw.0 * in_hw.1) as u64
}

fn linear(rows: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (rows * d_in * d_out) as u64
}

fn div(hw: (usize, usize), s: usize) -> (usize, usize) {
    (hw.0 / s, hw.1 / s)
}

struct Builder {
    stages: Vec<Stage>,
    flops: u64,
}

impl Builder {
    fn stage(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.stages.push(Stage {
            name: name.into(),
            shape: shape.to_vec(),
        });
    }
}

pub fn describe(cfg: &DptConfig, h: usize, w: usize) -> Result<ShapeReport> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let input = (h, w);
    let d = cfg.embed_dim;
    let f = cfg.features;
    let mut b = Builder {
        stages: Vec::new(),
        flops: 0,
    };
    b.stage("input", &[3, h, w]);

    let grid = div(input, cfg.token_stride());
    let n = grid.0 * grid.1;
    let mut stage_maps = Vec::new();
    match cfg.hybrid_config() {
        None => {
            b.flops += conv(3, d, cfg.patch_size, grid);
        }
        Some(hc) => {
            let mut hw = div(input, 2);
            b.flops += conv(3, hc.stem_channels, 7, hw);
            b.stage("hybrid.stem", &[hc.stem_channels, hw.0, hw.1]);
            let mut c_in = hc.stem_channels;
            for (s, (&width, &blocks)) in hc.widths.iter().zip(&hc.blocks).enumerate() {
                for k in 0..blocks {
                    let mid = width / 4;
                    let in_hw = hw;
                    if k == 0 {
                        hw = div(hw, 2);
                        b.flops += conv(c_in, width, 1, hw);
                    }
                    b.flops += conv(c_in, mid, 1, in_hw) + conv(mid, mid, 3, hw) + conv(mid, width, 1, hw);
                    c_in = width;
                }
                b.stage(format!("hybrid.stage{s}"), &[width, hw.0, hw.1]);
                stage_maps.push((width, hw));
            }
            b.flops += conv(c_in, d, 1, grid);
        }
    }
    b.stage("tokens", &[n + 1, d]);

    let attn = 4 * (n + 1) * (n + 1) * d;
    let per_layer = linear(n + 1, d, 3 * d)
        + linear(n + 1, d, d)
        + linear(n + 1, d, cfg.mlp_ratio * d)
        + linear(n + 1, cfg.mlp_ratio * d, d)
        + attn as u64;
    b.flops += per_layer * cfg.max_layer_hook() as u64;

    for (i, hook) in cfg.hooks.iter().enumerate() {
        let spec = ReassembleSpec::for_hook(cfg, i);
        let src_hw = match hook {
            Hook::Layer(l) => {
                b.stage(format!("encoder.layer{l}"), &[n + 1, d]);
                if cfg.readout == crate::config::Readout::Project {
                    b.flops += linear(n, 2 * d, d);
                }
                grid
            }
            Hook::Stage(s) => stage_maps[s.index()].1,
        };
        let c_in = input_channels(cfg, i);
        let out_hw = div(input, spec.scale);
        let (s, src) = (spec.scale, spec.source_stride);
        match spec.width {
            None => {
                b.flops += conv(c_in, f, 1, src_hw);
                b.flops += if s < src { conv_t(f, f, 3, src_hw) } else { conv(f, f, 3, out_hw) };
            }
            Some(wd) => {
                b.flops += conv(c_in, wd, 1, src_hw);
                if s < src {
                    b.flops += conv_t(wd, wd, src / s, src_hw);
                } else if s > src {
                    b.flops += conv(wd, wd, 3, out_hw);
                }
                b.flops += conv(wd, f, 3, out_hw);
            }
        }
        b.stage(format!("reassemble.{i}"), &[f, out_hw.0, out_hw.1]);
    }

    let nh = cfg.hooks.len();
    for i in (0..nh).rev() {
        let in_hw = div(input, cfg.scales[i]);
        let rcus = if i + 1 < nh { 2 } else { 1 };
        b.flops += rcus * 2 * conv(f, f, 3, in_hw);
        let out_hw = (2 * in_hw.0, 2 * in_hw.1);
        b.flops += conv(f, f, 1, out_hw);
        b.stage(format!("fusion.{i}"), &[f, out_hw.0, out_hw.1]);
    }

    let half = div(input, 2);
    match &cfg.head {
        Head::Depth => {
            b.flops += conv(f, f / 2, 3, half) + conv(f / 2, DEPTH_HIDDEN, 3, input) + conv(DEPTH_HIDDEN, 1, 1, input);
            b.stage("head", &[1, h, w]);
        }
        Head::Segmentation { num_classes, aux, .. } => {
            b.flops += conv(f, f, 3, half) + conv(f, *num_classes, 1, half);
            b.stage("head", &[*num_classes, h, w]);
            if *aux {
                let quarter = div(input, 4);
                b.flops += conv(f, f, 3, quarter) + conv(f, *num_classes, 1, quarter);
                b.stage("aux", &[*num_classes, h, w]);
            }
        }
    }

    let plan = model::plan(cfg);
    let encoder = plan.num_learnable_under("encoder.");
    let hybrid = plan.num_learnable_under("encoder.hybrid.");
    let mut groups = vec![ParamGroup {
        name: "encoder".into(),
        params: encoder - hybrid,
    }];
    if hybrid > 0 {
        groups.push(ParamGroup {
            name: "hybrid".into(),
            params: hybrid,
        });
    }
    for name in ["reassemble", "fusion", "head", "aux"] {
        let params = plan.num_learnable_under(&format!("{name}."));
        if params > 0 {
            groups.push(ParamGroup {
                name: name.into(),
                params,
            });
        }
    }

    Ok(ShapeReport {
        config: cfg.name.clone(),
        input,
        grid,
        patch_tokens: n,
        stages: b.stages,
        groups,
        total_params: plan.num_learnable(),
        flops: b.flops,
    })
}

/// FLOPs of one forward pass at `h x w`.
pub fn flops(cfg: &DptConfig, h: usize, w: usize) -> Result<u64> {
    Ok(describe(cfg, h, w)?.flops)
}

impl fmt::Display for ShapeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config {}  input {}x{}", self.config, self.input.0, self.input.1)?;
        writeln!(
            f,
            "grid {}x{}  patch tokens {}",
            self.grid.0, self.grid.1, self.patch_tokens
        )?;
        for s in &self.stages {
            let dims: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
            writeln!(f, "  {:<18} {}", s.name, dims.join(" x "))?;
        }
        for g in &self.groups {
            writeln!(f, "params {:<12} {}", g.name, g.params)?;
        }
        writeln!(
            f,
            "params total        {} ({:.2}M)",
            self.total_params,
            self.total_params as f64 / 1e6
        )?;
        write!(f, "flops               {} ({:.2} G)", self.flops, self.flops as f64 / 1e9)
    }
}
