//! Differentiable arrays and the training primitives built on them.

mod array;
pub mod checkpoint;
mod init;
mod nn;
mod ops;
mod optim;
mod scalar;

pub use array::{no_grad, DiffArray};
pub use init::{xavier_init, xavier_init_with_fans, Fans};
pub use nn::{conv1d_geometry, BatchStats, Padding};
pub use optim::{adam_step, AdamState, ParamGroup, Role};
pub use scalar::Scalar;
