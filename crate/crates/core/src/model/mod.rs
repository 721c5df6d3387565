//! Block-graph model representation, forward execution with activation
//! capture, and the binary model / calibration file formats.

mod attention;
mod block;
mod conv;
pub mod format;
mod graph;

pub use attention::attention_heads;
pub use block::{AttentionBlock, Block, ConvBlock, ConvGeometry, DenseBlock, FfnBlock};
pub use conv::conv2d;
pub use format::{load_calibration, load_model, save_calibration, save_model};
pub use graph::{BlockGraph, Forward};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            // exact erf form, not the tanh approximation
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Identity => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" => Ok(Activation::Identity),
            other => Err(format!(
                "unknown activation {other:?}; expected relu, gelu or identity"
            )),
        }
    }
}
