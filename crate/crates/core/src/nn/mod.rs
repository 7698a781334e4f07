//! Layer primitives. Every layer is a pure forward function paired with an
//! explicit backward function; there is no autodiff graph.

mod activation;
mod conv;
mod loss;
mod pool;

pub use activation::{dropout_backward, dropout_forward, relu_backward, relu_forward, DropoutMask};
pub use conv::{
    conv3d_backward, conv3d_forward, upconv3d_backward, upconv3d_forward, ConvKernel, KernelShape,
};
pub use loss::{softmax_voxelwise, weighted_cross_entropy, PROB_FLOOR, SOFTMAX_CUTOFF};
pub use pool::{maxpool3d_backward, maxpool3d_forward, PoolIndices};
