//! Dense prediction transformer: a ViT encoder with hooked layers, the
//! reassemble/fusion convolutional decoder, depth and segmentation heads,
//! and the evaluation, serialization and benchmarking machinery around them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod archive;
pub mod bench;
pub mod checks;
pub mod config;
pub mod encoder;
pub mod error;
pub mod feature;
pub mod fusion;
pub mod heads;
pub mod hybrid;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod reassemble;
pub mod shapes;
pub mod train;

pub use dpt_tensor;
pub use dpt_tensor::{Scalar, Tape, Tensor, Var};

pub use config::{DptConfig, Embedder, Head, Hook, HybridConfig, Readout, ResNetStage, ResampleLayout};
pub use encoder::{HookOutput, TokenSet};
pub use error::{DptError, Result};
pub use feature::FeatureMap;
pub use model::{count_parameters, Dpt, Outputs, Prediction};
pub use nn::{Forward, Mode};
pub use params::{ParamStore, Plan};

pub type Dpt32 = Dpt<f32>;
pub type Dpt64 = Dpt<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
