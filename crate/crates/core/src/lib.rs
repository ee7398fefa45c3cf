//! Zero-shot anomaly detection with knowledge-driven prompt learning and
//! cross-modal fusion over a frozen vision-language backbone.

pub mod adapter;
pub mod attention;
pub mod autograd;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod image_io;
pub mod kb;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod transformer;
pub mod vision;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Mat;
