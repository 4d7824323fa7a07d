//! The `dpt` command line: argument definitions, exit codes and the
//! subcommand implementations.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dpt_core::{DptConfig, DptError};

mod commands;

pub use commands::run;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "dpt", version, about = "Dense prediction transformer: shapes, inference, checks and benchmarks")]
pub struct Cli {
    /// Worker threads for the numeric kernels; results do not depend on it.
    #[arg(long, global = true, env = "DPT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

/// Where the model configuration comes from.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset name (base, large, hybrid, toy, toy-seg, toy-hybrid).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,

    /// JSON config file, or an inline JSON document.
    #[arg(long)]
    pub config: Option<String>,
}

impl ModelArgs {
    /// Falls back to `default` when neither flag is given.
    pub fn resolve(&self, default: &str) -> Result<DptConfig, CliError> {
        if let Some(doc) = &self.config {
            let text = if doc.trim_start().starts_with('{') {
                doc.clone()
            } else {
                std::fs::read_to_string(doc).map_err(|e| CliError::io(format!("{doc}: {e}")))?
            };
            return Ok(DptConfig::from_json(&text)?);
        }
        Ok(DptConfig::parse(self.preset.as_deref().unwrap_or(default))?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-stage tensor shapes and the learnable parameter count.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input size; defaults to the config's training size.
        #[arg(long)]
        size: Option<usize>,
        /// Input width when it differs from the height.
        #[arg(long)]
        width: Option<usize>,
        /// Print the config as JSON instead.
        #[arg(long)]
        dump_config: bool,
    },
    /// Write a freshly initialized weight archive.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store 64-bit values.
        #[arg(long)]
        double: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the model on one image.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Weight archive; without it the model is randomly initialized from
        /// `--seed`.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pad reflectively to a multiple of 32 and crop the output back.
        #[arg(long)]
        auto_pad: bool,
        /// Input image (PGM, PPM or float map).
        input: PathBuf,
        /// Depth map, or label map for segmentation. `.pgm`/`.ppm` outputs
        /// are rescaled for viewing; anything else keeps raw floats.
        #[arg(short, long)]
        output: PathBuf,
        /// Raw segmentation logits (float format).
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every primitive op and of the
    /// end-to-end training loss.
    Gradcheck {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Elements sampled per parameter tensor.
        #[arg(long, default_value_t = 3)]
        samples: usize,
        /// Also run the corrupted-backward fixture, which must fail.
        #[arg(long)]
        fixture: bool,
    },
    /// Forward-pass latency per input size, and optionally the accuracy
    /// versus resolution table.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square input sizes; defaults to the config's training size.
        #[arg(long = "size", value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = dpt_core::bench::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = dpt_core::bench::DEFAULT_WARMUP)]
        warmup: usize,
        /// Ground-truth sample as `IMAGE,DEPTH`; enables the degradation
        /// table. Repeatable.
        #[arg(long = "sample")]
        samples: Vec<String>,
        /// Use this many synthetic scenes as ground truth.
        #[arg(long, default_value_t = 0)]
        synthetic: usize,
        /// Reference size of the degradation table.
        #[arg(long)]
        reference: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Metrics of a prediction against ground truth.
    Eval {
        #[arg(long, value_enum, default_value_t = Task::Depth)]
        task: Task,
        /// Prediction file (inverse depth, or label map).
        prediction: PathBuf,
        /// Ground-truth file (depth, or label map).
        ground_truth: PathBuf,
        /// Validity mask; nonzero pixels are scored.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Ground truth already holds inverse depth.
        #[arg(long)]
        inverse: bool,
        /// Score the raw prediction without scale-and-shift alignment.
        #[arg(long)]
        no_align: bool,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        ignore_label: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Convert between netpbm and the raw float format.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Rescale to the full output range.
        #[arg(long)]
        display: bool,
        /// Bit depth of netpbm output.
        #[arg(long, default_value_t = 8)]
        bits: u16,
    },
    /// Train a depth model on one synthetic scene until the loss is small.
    Overfit {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Print the loss every this many steps.
        #[arg(long, default_value_t = 50)]
        every: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Depth,
    Seg,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<dpt_core::dpt_tensor::TensorError> for CliError {
    fn from(e: dpt_core::dpt_tensor::TensorError) -> Self {
        DptError::from(e).into()
    }
}

impl From<DptError> for CliError {
    fn from(e: DptError) -> Self {
        let code = match &e {
            DptError::Io(_) | DptError::Image(_) | DptError::Archive(_) => EXIT_IO,
            DptError::Tensor(_) => 1,
            _ => EXIT_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}
