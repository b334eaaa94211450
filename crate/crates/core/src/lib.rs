//! Flexible variational information bottleneck (FVIB) for classification.
//!
//! A single regression of a feature extractor onto constant simplex class
//! targets yields, for every `β ∈ [0, 1]`, a Gaussian encoder and softmax
//! classifier that maximize the second-order approximation of the VIB
//! objective. `β` then becomes an evaluation-time knob, which makes IB-curve
//! sweeps a matter of evaluation and allows continuous post-hoc tuning of
//! `β` for calibration.
//!
//! Modules:
//!
//! - [`simplex`]: the class-target matrix `L` and its simplex geometry
//! - [`objectives`]: Gaussian KL, the second-order objective, Monte-Carlo VIB
//!   objective and the information bounds
//! - [`net`]: dense rectifier network, backprop and Adam
//! - [`fvib`]: beta-free training and instantiation with confidence tuning
//! - [`vib`]: per-β baselines (sampled VIB, direct second-order training,
//!   plain cross-entropy)
//! - [`calibration`]: ECE, temperature scaling, continuous β optimization
//! - [`data`]: datasets, balancing, splits, synthetic blobs
//! - [`sweep`]: β sweeps, calibration comparisons, checkpoints, config
//! - [`verify`]: the numeric identity suite behind `fvib verify`

pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fvib;
pub mod net;
pub mod numeric;
pub mod objectives;
pub mod simplex;
pub mod sweep;
pub mod verify;
pub mod vib;

pub use error::{Error, Result};
pub use fvib::{ct_temperature, instantiate, ConfidenceTuning, FvibModel, TrainedFvib};
pub use net::{DenseNet, LrSchedule, TrainConfig};
pub use objectives::{Classifier, Covariance, GaussianEncoding, IbBounds};
pub use simplex::{build_target_matrix, TargetMatrix};
