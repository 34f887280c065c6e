//! Dense and convolutional layers with hand-written backpropagation.

mod gradcheck;
mod layer;
mod loss;
mod network;

pub use gradcheck::{finite_diff_gradient, relative_error};
pub use layer::{
    Activation, BatchNorm1d, Conv2d, Dense, Layer, LayerCache, Mode, Padding, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};
pub use loss::{batch_cross_entropy, log_softmax, log_sum_exp, softmax, softmax_cross_entropy};
pub use network::{ForwardCache, GradientSet, Network, NetworkBuilder};
