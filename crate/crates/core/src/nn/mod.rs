//! Minimal CPU convolutional-network engine: layers, forward/backward and
//! optimizers. Everything is `f32` and single-threaded per network.

mod kernels;
mod layers;
mod net;
mod optim;

pub use kernels::{softmax, softmax_cross_entropy};
pub use layers::{Conv2d, Dense};
pub use net::{ConvNet, ForwardCache, Grads, ImageShape};
pub use optim::{Optimizer, OptimizerKind};
