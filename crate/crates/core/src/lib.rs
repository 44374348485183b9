//! Sparse autoencoders trained with a hierarchical TopK objective: one model
//! that reconstructs well from every prefix of its sorted sparse code.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the storage
//! type used by the trainer (`f32`) and by reference checks (`f64`).

pub mod codes;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod hloss;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod train;

pub use codes::{IndexSchedule, JumpReluThreshold, SparseCode};
pub use error::{Error, FormatError, Result};
pub use evalkit::{EvalOptions, EvalReport, InferenceMode};
pub use hloss::{Grads, LossValue};
pub use linalg::{Matrix, Rng};
pub use model::{Checkpoint, CheckpointMeta, SaeParams};
pub use scalar::Scalar;
pub use train::{ActivationKind, TrainConfig, Trainer};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type SaeParams32 = SaeParams<f32>;
pub type SaeParams64 = SaeParams<f64>;
pub type SparseCode32 = SparseCode<f32>;
pub type Grads32 = Grads<f32>;
pub type Grads64 = Grads<f64>;
