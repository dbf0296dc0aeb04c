//! Dense arrays, the policy/value network, RMSProp and checkpoints.

pub mod array;
pub mod checkpoint;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scalar;

pub use array::{Array, DimError, DynArray};
pub use model::{ForwardOutput, GradientSet, ModelParams, ModelShape, DEFAULT_HIDDEN};
pub use ops::{entropy, log_softmax};
pub use optim::{OptimError, RmsProp, RmsPropConfig};
pub use scalar::{DType, Element, Scalar};
