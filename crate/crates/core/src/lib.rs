pub mod architecture;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod froc;
pub mod gradsuite;
pub mod loss;
pub mod rng;
pub mod tensor;
pub mod train;

pub use architecture::{DenseBlockSpec, Network};
pub use config::{Config, DownsampleMode, NetworkConfig, OutputPolicy};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
