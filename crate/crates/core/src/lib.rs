//! Multi-modal multi-type fact verification.
//!
//! The pipeline embeds four streams (claim text, claim image, document text,
//! document image), fuses them with six shared-weight co-attention blocks,
//! appends 32 explicit text statistics and classifies into five categories.
//! Several trained models are combined with a power-weighted ensemble.

pub mod autograd;
pub mod classifier;
pub mod config;
pub mod data;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod param;
pub mod tensor;
pub mod tensor_io;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use par::Parallelism;
pub use param::{ParamGroup, ParamId, ParamStore};
pub use tensor::{Scalar, Shape, Tensor};
