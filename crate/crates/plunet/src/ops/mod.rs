//! Primitive tensor operations: forward kernels and their gradients.
//!
//! Every kernel accumulates each output element in a fixed order
//! (channel, then kernel row, then kernel column), so results are
//! bit-identical between the sequential and parallel execution paths
//! and across runs.

mod concat;
mod conv;
mod linear;
mod norm;
mod pointwise;
mod pool;

pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{
    conv2d, conv2d_backward, conv2d_depthwise_separable, conv_transpose2d,
    conv_transpose2d_backward,
};
pub(crate) use conv::separable_parts;
pub use linear::{linear, linear_backward};
pub use norm::{
    batchnorm2d_eval, batchnorm2d_eval_backward, batchnorm2d_train, batchnorm2d_train_backward,
    BnSaved,
};
pub use pointwise::{
    relu, relu_backward, scale_channels, scale_channels_backward, sigmoid, sigmoid_backward,
};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward};

use crate::error::{bail_shape, bail_spec, Result};
use crate::tensor::{dims, Dims};

/// Full description of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// 3x3 convolution, stride 1, `padding = dilation` so spatial size is
    /// preserved. This is the shape every block in the model family uses.
    pub fn k3(in_channels: usize, out_channels: usize, dilation: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (dilation, dilation),
            dilation: (dilation, dilation),
            groups: 1,
            bias: true,
        }
    }

    /// 1x1 pointwise convolution.
    pub fn k1(in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
            bias: true,
        }
    }

    /// Per-channel 3x3 convolution (`groups == channels`).
    pub fn depthwise(channels: usize, dilation: usize) -> ConvSpec {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (dilation, dilation),
            dilation: (dilation, dilation),
            groups: channels,
            bias: true,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> ConvSpec {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            bail_spec!("conv channels must be positive");
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            bail_spec!("conv kernel must be positive");
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            bail_spec!("conv stride must be positive");
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 {
            bail_spec!("conv dilation must be positive");
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            bail_spec!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups,
                self.in_channels,
                self.out_channels
            );
        }
        Ok(())
    }

    /// Spatial footprint of the dilated kernel: `d*(k-1)+1` per axis.
    pub fn effective_extent(&self) -> (usize, usize) {
        (
            self.dilation.0 * (self.kernel.0 - 1) + 1,
            self.dilation.1 * (self.kernel.1 - 1) + 1,
        )
    }

    /// Dry-run shape inference; the forward kernel produces exactly this.
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        self.validate()?;
        input.validate()?;
        if input.c != self.in_channels {
            bail_shape!(
                "input has {} channels, spec expects {}",
                input.c,
                self.in_channels
            );
        }
        let (eh, ew) = self.effective_extent();
        let ph = input.h + 2 * self.padding.0;
        let pw = input.w + 2 * self.padding.1;
        if ph < eh || pw < ew {
            bail_shape!(
                "padded input {}x{} smaller than effective kernel {}x{}",
                ph,
                pw,
                eh,
                ew
            );
        }
        let h = (ph - eh) / self.stride.0 + 1;
        let w = (pw - ew) / self.stride.1 + 1;
        Ok(dims(input.n, self.out_channels, h, w))
    }

    /// Weight tensor layout `(out_ch, in_ch/groups, kh, kw)`.
    pub fn weight_dims(&self) -> Dims {
        dims(
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Bias tensor layout `(1, out_ch, 1, 1)`.
    pub fn bias_dims(&self) -> Dims {
        dims(1, self.out_channels, 1, 1)
    }

    /// Multiply-accumulate count for one forward pass at `input`.
    pub fn macs(&self, input: Dims) -> Result<u64> {
        let out = self.output_dims(input)?;
        Ok(out.count() as u64
            * (self.in_channels / self.groups) as u64
            * (self.kernel.0 * self.kernel.1) as u64)
    }
}

/// Runs `f` over equally sized chunks of `data`, in parallel when the
/// runtime allows it. Chunks are disjoint, so both paths are bit-equal.
pub(crate) fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if crate::runtime::parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}
