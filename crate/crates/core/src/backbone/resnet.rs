//! Bottleneck ResNet (50/101) with torchvision parameter names.

use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{global_avg_pool, ConvBn};
use super::FeatureExtractor;

struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(c_in: usize, planes: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let c_out = planes * 4;
        let downsample = if stride != 1 || c_in != c_out {
            Some(ConvBn::seq(c_in, c_out, 1, stride, 1, vb.pp("downsample"))?)
        } else {
            None
        };
        Ok(Self {
            c1: ConvBn::new(c_in, planes, 1, 1, 1, vb.pp("conv1"), vb.pp("bn1"))?,
            c2: ConvBn::new(planes, planes, 3, stride, 1, vb.pp("conv2"), vb.pp("bn2"))?,
            c3: ConvBn::new(planes, c_out, 1, 1, 1, vb.pp("conv3"), vb.pp("bn3"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.c1.forward_t(x, train)?.relu()?;
        let y = self.c2.forward_t(&y, train)?.relu()?;
        let y = self.c3.forward_t(&y, train)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward_t(x, train)?,
            None => x.clone(),
        };
        (y + shortcut)?.relu()
    }
}

pub struct ResNet {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
}

impl ResNet {
    pub fn new(layers: [usize; 4], vb: VarBuilder) -> Result<Self> {
        // 7x7 conv has padding 3, which ConvBn derives from the kernel size.
        let stem = ConvBn::new(3, 64, 7, 2, 1, vb.pp("conv1"), vb.pp("bn1"))?;
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (stage, &count) in layers.iter().enumerate() {
            let planes = 64 << stage;
            let stride = if stage == 0 { 1 } else { 2 };
            let stage_vb = vb.pp(format!("layer{}", stage + 1));
            for i in 0..count {
                let s = if i == 0 { stride } else { 1 };
                blocks.push(Bottleneck::new(c_in, planes, s, stage_vb.pp(i.to_string()))?);
                c_in = planes * 4;
            }
        }
        Ok(Self { stem, blocks })
    }

    pub fn resnet50(vb: VarBuilder) -> Result<Self> {
        Self::new([3, 4, 6, 3], vb)
    }

    pub fn resnet101(vb: VarBuilder) -> Result<Self> {
        Self::new([3, 4, 23, 3], vb)
    }
}

impl FeatureExtractor for ResNet {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.stem.forward_t(x, train)?.relu()?;
        // Inputs are post-ReLU, so zero padding is equivalent to -inf padding.
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for b in &self.blocks {
            x = b.forward_t(&x, train)?;
        }
        global_avg_pool(&x)
    }

    fn feature_dim(&self) -> usize {
        2048
    }
}
