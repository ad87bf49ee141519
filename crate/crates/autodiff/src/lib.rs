//! Dense tensors and a reverse-mode tape covering the op set of a 3D
//! encoder-decoder segmentation network: convolution (plain and strided
//! down-sampling), trilinear up-sampling, batch norm, ReLU, residual add,
//! channel concat and channel softmax.

mod error;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{softmax_channels, CustomOp, Graph, Var};
pub use kernels::conv::ConvGeometry;
pub use kernels::norm::{BatchNormOptions, NormMode, RunningStats};
pub use kernels::resize::resize_trilinear;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
