//! Semi-supervised single-image deraining.
//!
//! A rainy image `O` is restored as `O - f(O) + g(O)`, where `f` (the rain
//! residual network) predicts the additive rain layer and `g` (the detail
//! repair network) restores detail lost by the subtraction. Training mixes
//! paired synthetic data with unpaired real rainy images, regularized by
//! contrastive losses in the feature space of a frozen encoder.
//!
//! Everything runs on the CPU with a small reverse-mode autodiff engine
//! ([`autograd`]) over NCHW `f64` tensors.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod drn;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rrn;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{BlockKind, TrainConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, psnr, ssim, MetricsReport};
pub use model::DerainModel;
pub use tensor::Tensor;
pub use train::{train, LossReport, Trainer};
