//! Small f64 transformer stack with hand-written backward passes.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::Ctx;
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Grads, Group, ParamId, ParamStore};
pub use tensor::Tensor;
pub use transformer::{BatchMemory, MemoryRef, NetConfig, Network, StackCache};
