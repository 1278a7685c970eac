//! Attribute-appearance person re-identification at desk scale.
//!
//! A small convolutional stem produces a shared feature tensor that feeds two
//! branches: an attribute branch that sweeps attributes with an
//! attention-refined LSTM, and an appearance branch that pools horizontal,
//! vertical and global stripes. Both are trained jointly and their features
//! are concatenated into a retrieval descriptor.

pub mod appearance;
pub mod attribute;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod params;
pub mod schema;
pub mod stem;
pub mod tensor;
pub mod trainer;

pub use autograd::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
