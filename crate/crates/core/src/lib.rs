//! Multi-adversarial domain adaptation on a small reverse-mode autodiff core.
//!
//! The crate trains a feature extractor, a label predictor and a bank of
//! class-wise domain discriminators (one per class, fed features weighted by
//! the predicted class probabilities) through a gradient-reversal layer. The
//! single-discriminator adversarial baseline and a source-only baseline
//! share the same graph.
//!
//! Modules:
//!
//! * [`tensor`], [`autodiff`]: dense matrices and the tape.
//! * [`nn`]: layers, momentum SGD, learning-rate and λ schedules.
//! * [`model`]: objectives, training loop, checkpoints.
//! * [`data`]: synthetic domain-shift tasks, CSV features, batching.
//! * [`eval`]: accuracy, proxy A-distance, embedding export.
//! * [`gradcheck`]: finite-difference verification of the full graph.
//! * [`cli`]: the file-driven commands behind the `mada` binary.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod tensor;

pub use autodiff::{finite_diff_check, Gradients, Tape, Var};
pub use data::{gen_multimode, make_batches, Batch, Dataset, Domain, Synthetic, SyntheticConfig};
pub use error::{Error, Result};
pub use eval::{accuracy, proxy_a_distance, Metrics, ProbeConfig};
pub use model::{
    dann_loss, mada_loss, predict, source_only_loss, train, Algorithm, Architecture, MadaModel,
    ShareMode, StepOutput, TrainConfig,
};
pub use nn::{lambda_at, lr_at, LambdaSchedule, LrSchedule, Mlp, SgdMomentum};
pub use tensor::Tensor;
