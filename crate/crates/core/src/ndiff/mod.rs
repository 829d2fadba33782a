//! Minimal differentiable numeric substrate: dense tensors, a handful of
//! neural primitives with exact backward passes, Adam, a finite-difference
//! oracle and FLOP accounting.

pub mod flops;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

pub use flops::{flop_count, OpDesc};
pub use gradcheck::finite_diff_check;
pub use ops::{
    conv2d, fc, global_avg_pool, relu, sigmoid, sigmoid_scalar, softmax_cross_entropy, GradRecord,
    Padding,
};
pub use optim::{Adam, LrSchedule};
pub use params::{Params, StorePass};
pub use tensor::Tensor;
