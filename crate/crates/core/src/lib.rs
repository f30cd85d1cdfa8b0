pub mod annotate;
pub mod autodiff;
pub mod error;
pub mod imgproc;
pub mod iohub;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
