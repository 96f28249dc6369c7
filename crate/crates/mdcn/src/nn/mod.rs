//! Neural-network layer primitives: forward and backward passes for every
//! layer the model uses. All functions are pure; batch normalization returns
//! its updated state instead of mutating shared state.

mod activation;
mod batchnorm;
mod concat;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{batchnorm_apply, batchnorm_backward, BnCache, BnMode, BnState};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv3d_backward, conv3d_forward, conv3d_grad_input, conv3d_grad_weights};
pub use linear::{linear_backward, linear_forward};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool3d_apply, maxpool3d_backward};
