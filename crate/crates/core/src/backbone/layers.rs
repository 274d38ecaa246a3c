//! Shared building blocks.

use candle_core::{Result, Tensor};
use candle_nn::{batch_norm, conv2d_no_bias, BatchNorm, Conv2d, Conv2dConfig, Module, ModuleT, VarBuilder};

/// Convolution followed by batch norm, stored as `<prefix>.{conv}` and
/// `<prefix>.{bn}`.
pub struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

#[allow(clippy::too_many_arguments)]
impl ConvBn {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        conv_vb: VarBuilder,
        bn_vb: VarBuilder,
    ) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: (kernel - 1) / 2,
            stride,
            dilation: 1,
            groups,
            cudnn_fwd_algo: None,
        };
        Ok(Self {
            conv: conv2d_no_bias(c_in, c_out, kernel, cfg, conv_vb)?,
            bn: batch_norm(c_out, 1e-5, bn_vb)?,
        })
    }

    /// torchvision `Conv2dNormActivation` layout: `<vb>.0` conv, `<vb>.1` bn.
    pub fn seq(c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Self::new(c_in, c_out, kernel, stride, groups, vb.pp("0"), vb.pp("1"))
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

/// Global average pool over the spatial dims: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.mean(3)?.mean(2)
}
