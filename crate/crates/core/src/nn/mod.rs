//! Minimal CPU tensor and convolution kernels with hand-written backward
//! passes. Everything is generic over [`Scalar`] so the same network code
//! runs in `f32` for training and `f64` for gradient checking.

mod conv;
mod scalar;
mod shuffle;
mod tensor;

pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use scalar::{gemm, Scalar};
pub use shuffle::{pixel_shuffle_1d, pixel_unshuffle_1d};
pub use tensor::Tensor;

pub fn relu_inplace<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the rectifier's output was not positive.
pub fn relu_backward_inplace<T: Scalar>(output: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}
