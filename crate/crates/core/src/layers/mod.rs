//! Layer kernels: forward and backward passes as pure functions over
//! [`Tensor`](crate::Tensor)s, plus the parameter and FLOP formulas used by
//! cost accounting.
//!
//! Every kernel accumulates in a fixed loop order so results are bitwise
//! reproducible and comparable against naive reference loops.

mod conv;
mod dense;
mod elementwise;
mod norm;
mod pool;
mod softmax;

pub use conv::{conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward};
pub use dense::{dense, dense_backward};
pub use elementwise::{
    add, concat_channels, concat_channels_backward, dropout_mask, mul, relu, relu_backward,
    split_channels,
};
pub use norm::{
    batch_norm_infer, batch_norm_infer_backward, batch_norm_train, batch_norm_train_backward,
    BatchStats, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d,
    max_pool2d_backward, MaxPoolIndices,
};
pub use softmax::{exit_loss, exit_loss_backward, softmax_rows, softmax_rows_backward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad along one spatial axis.
///
/// `same` padding puts the odd pixel of an uneven total pad at the
/// bottom/right.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return Err(Error::contract("kernel and stride must be at least 1"));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::shape(format!(
                    "valid window {kernel} does not fit extent {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// Spatial geometry shared by sliding-window kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        let (out_h, pad_top) = output_extent(in_h, kernel, stride, padding)?;
        let (out_w, pad_left) = output_extent(in_w, kernel, stride, padding)?;
        Ok(Self {
            stride,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Input row for output row `oh` and kernel row `kh`, if inside the image.
    #[inline]
    pub fn in_row(&self, oh: usize, kh: usize) -> Option<usize> {
        (oh * self.stride + kh).checked_sub(self.pad_top).filter(|&r| r < self.in_h)
    }

    #[inline]
    pub fn in_col(&self, ow: usize, kw: usize) -> Option<usize> {
        (ow * self.stride + kw).checked_sub(self.pad_left).filter(|&c| c < self.in_w)
    }
}

/// Parameter count of a K×K convolution: `K·K·Cin·Cout (+ Cout)`.
pub fn conv2d_params(kernel: usize, cin: usize, cout: usize, bias: bool) -> u64 {
    (kernel * kernel * cin * cout + if bias { cout } else { 0 }) as u64
}

/// `2·Hout·Wout·Cout·K·K·Cin`
pub fn conv2d_flops(out_h: usize, out_w: usize, kernel: usize, cin: usize, cout: usize) -> u64 {
    2 * (out_h * out_w * cout * kernel * kernel * cin) as u64
}

pub fn depthwise_params(kernel: usize, channels: usize, bias: bool) -> u64 {
    (kernel * kernel * channels + if bias { channels } else { 0 }) as u64
}

/// `2·Hout·Wout·C·K·K`
pub fn depthwise_flops(out_h: usize, out_w: usize, kernel: usize, channels: usize) -> u64 {
    2 * (out_h * out_w * channels * kernel * kernel) as u64
}

pub fn dense_params(features: usize, classes: usize) -> u64 {
    (features * classes + classes) as u64
}

pub fn dense_flops(features: usize, classes: usize) -> u64 {
    2 * (features * classes) as u64
}

/// γ, β, moving mean and moving variance.
pub fn batch_norm_params(channels: usize) -> u64 {
    4 * channels as u64
}
