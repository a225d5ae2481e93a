//! Gait recognition from 2D pose sequences with a hierarchical
//! spatio-temporal transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`] and [`nn`]: a small dense
//!   tensor engine with reverse-mode differentiation and transformer layers.
//! * [`skeleton`]: poses, sequences, the joint merge hierarchy and
//!   preprocessing.
//! * [`model`]: the four-stage pyramid producing gait embeddings.
//! * [`training`]: triplet loss, batch-hard mining, AdamW and the cyclic
//!   learning-rate schedule.
//! * [`evaluation`]: rank-K retrieval, the cross-view protocol and the
//!   statistics used for ablations.
//! * [`synth`]: a parametric walker generator for end-to-end experiments.
//! * [`dataio`]: sequence records, manifests, checkpoints and run configs.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{with_stages, GaitPT, GaitPTConfig, StageConfig};
pub use skeleton::{Condition, GaitSequence, PartitionScheme, Pose};
pub use tensor::{DType, Element, Tensor};
