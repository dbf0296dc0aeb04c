//! Actor-learner reinforcement learning: V-trace corrected actor-critic
//! training fed by environment servers over a framed TCP protocol
//! ("poly" mode) or by in-process actors writing into shared rollout
//! buffers ("mono" mode).

pub mod envs;
pub mod numerics;
pub mod pipeline;
pub mod queues;
pub mod rollout;
pub mod vtrace;
pub mod wire;

pub use numerics::{Array, DType, DynArray, ModelParams, ModelShape, Scalar};

/// Parameters used for training and inference.
pub type Params = ModelParams<f32>;
/// Double precision parameters, used for gradient checks.
pub type Params64 = ModelParams<f64>;
