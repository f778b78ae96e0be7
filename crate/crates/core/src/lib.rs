//! Reverse adversarial input calibration.
//!
//! A small reverse-mode autodiff engine drives three things: training compact
//! classifiers, crafting signed-gradient input perturbations in both the
//! adversarial and the restoring direction, and training generative
//! calibraters that learn a per-input perturbation undoing a distribution
//! shift a frozen classifier was never trained on. Weight quantization and
//! synthetic benchmark data round out the toolkit.
//!
//! The numeric core ([`tensor`], [`graph`], [`adam`], [`gradcheck`], the
//! quantization kernels) is generic over [`scalar::Scalar`] and runs at f32
//! or f64. Everything downstream of the model zoo is pinned to the f64
//! aliases exported at the crate root, which is also what the file formats
//! store.

pub mod adam;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hash;
pub mod idx;
mod kernels;
pub mod model;
pub mod model_io;
pub mod perturb;
pub mod quant;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod transform;

pub use error::{Error, Result};

/// f64 tensor, the working type of the model zoo and experiments.
pub type Tensor = tensor::TensorBase<f64>;
/// f64 computation graph.
pub type Graph = graph::GraphBase<f64>;
/// f64 graph op.
pub type OpF = graph::Op<f64>;
/// f64 Adam optimizer.
pub type Adam = adam::AdamBase<f64>;
/// f64 named parameter set.
pub type Params = adam::ParamMap<f64>;

pub use graph::NodeId;
