//! Multimodal manipulation detection and grounding on a small reverse-mode
//! tensor engine.
//!
//! The modules follow the network: [`encoder`] produces patch and token
//! features, [`mdsc`], [`ufmr`] and [`mfar`] add the supervision and
//! interaction stages, [`judgment`] holds the classification and grounding
//! heads, and [`model`] wires them into one forward pass. [`train`] owns the
//! optimizer, checkpoints and configuration; [`checks`] is the gradient suite.

// Tensor ops return `Result` and take their operands by value, so the std
// operator traits do not fit; `!(x > 0.0)` is the NaN-rejecting guard.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod data;
pub mod encoder;
pub mod error;
pub mod judgment;
pub mod mdsc;
pub mod metrics;
pub mod mfar;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod train;
pub mod ufmr;

pub use data::{BBox, Dataset, DatasetConfig, LabelSet, Sample};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{Ablation, DataShape, FmsModel, LossValues, Mode, ModelConfig, Prediction};
pub use nn::{ParamId, ParamStore};
pub use numeric::{Array, Tape, Tensor};
pub use train::{Checkpoint, TrainConfig};
