use dpt_tensor::{Scalar, Var};

use crate::error::{input_err, Result};

/// An image-like `C x H x W` representation.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar> {
    pub data: Var<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Var<T>) -> Result<Self> {
        match data.shape() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok(Self { data }),
            other => Err(input_err(format!("feature map must be C x H x W, got {other:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }
}
