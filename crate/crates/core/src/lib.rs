//! IMU-to-EMG estimation pipeline: biomedical signal processing, a
//! GEGLU-gated Transformer sequence regressor with its own reverse-mode
//! autodiff, leave-one-subject-out training, few-shot subject adaptation,
//! and the evaluation metric suite.

pub mod error;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use scalar::Real;
pub use tensor::{Graph, NodeId, Tensor};
