//! EfficientNet (B0/B1/B3) with torchvision parameter names.
//!
//! Stochastic depth and classifier dropout are omitted: training stays a
//! deterministic function of the seeds.

use candle_core::{Result, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, Module, VarBuilder};

use super::layers::{global_avg_pool, ConvBn};
use super::FeatureExtractor;

/// (expand ratio, kernel, stride, in channels, out channels, layers) for B0.
const BASE_STAGES: [(usize, usize, usize, usize, usize, usize); 7] = [
    (1, 3, 1, 32, 16, 1),
    (6, 3, 2, 16, 24, 2),
    (6, 5, 2, 24, 40, 2),
    (6, 3, 2, 40, 80, 3),
    (6, 5, 1, 80, 112, 3),
    (6, 5, 2, 112, 192, 4),
    (6, 3, 1, 192, 320, 1),
];

#[derive(Debug, Clone, Copy)]
pub struct Scaling {
    pub width: f64,
    pub depth: f64,
}

impl Scaling {
    pub const B0: Scaling = Scaling { width: 1.0, depth: 1.0 };
    pub const B1: Scaling = Scaling { width: 1.0, depth: 1.1 };
    pub const B3: Scaling = Scaling { width: 1.2, depth: 1.4 };

    pub fn channels(&self, c: usize) -> usize {
        make_divisible(c as f64 * self.width, 8)
    }

    pub fn layers(&self, n: usize) -> usize {
        (n as f64 * self.depth).ceil() as usize
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.channels(320)
    }
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = (((v + d / 2.0) as usize) / divisor * divisor).max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

struct SqueezeExcite {
    fc1: Conv2d,
    fc2: Conv2d,
}

impl SqueezeExcite {
    fn new(channels: usize, squeeze: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig::default();
        Ok(Self {
            fc1: conv2d(channels, squeeze, 1, cfg, vb.pp("fc1"))?,
            fc2: conv2d(squeeze, channels, 1, cfg, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let s = self.fc1.forward(&s)?.silu()?;
        let s = candle_nn::ops::sigmoid(&self.fc2.forward(&s)?)?;
        x.broadcast_mul(&s)
    }
}

struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: SqueezeExcite,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn new(expand_ratio: usize, kernel: usize, stride: usize, c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let vb = vb.pp("block");
        let expanded = c_in * expand_ratio;
        let mut idx = 0;
        let expand = if expanded != c_in {
            idx += 1;
            Some(ConvBn::seq(c_in, expanded, 1, 1, 1, vb.pp("0"))?)
        } else {
            None
        };
        let depthwise = ConvBn::seq(expanded, expanded, kernel, stride, expanded, vb.pp(idx.to_string()))?;
        let se = SqueezeExcite::new(expanded, (c_in / 4).max(1), vb.pp((idx + 1).to_string()))?;
        let project = ConvBn::seq(expanded, c_out, 1, 1, 1, vb.pp((idx + 2).to_string()))?;
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && c_in == c_out,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        if let Some(e) = &self.expand {
            y = e.forward_t(&y, train)?.silu()?;
        }
        let y = self.depthwise.forward_t(&y, train)?.silu()?;
        let y = self.se.forward(&y)?;
        let y = self.project.forward_t(&y, train)?;
        if self.residual {
            y + x
        } else {
            Ok(y)
        }
    }
}

pub struct EfficientNet {
    stem: ConvBn,
    blocks: Vec<MbConv>,
    top: ConvBn,
    feature_dim: usize,
}

impl EfficientNet {
    pub fn new(scaling: Scaling, vb: VarBuilder) -> Result<Self> {
        let features = vb.pp("features");
        let stem_out = scaling.channels(32);
        let stem = ConvBn::seq(3, stem_out, 3, 2, 1, features.pp("0"))?;
        let mut blocks = Vec::new();
        let mut last = stem_out;
        for (stage, &(expand, kernel, stride, c_in, c_out, layers)) in BASE_STAGES.iter().enumerate() {
            let stage_vb = features.pp((stage + 1).to_string());
            let c_in = scaling.channels(c_in);
            let c_out = scaling.channels(c_out);
            for i in 0..scaling.layers(layers) {
                let (cin, s) = if i == 0 { (c_in, stride) } else { (c_out, 1) };
                blocks.push(MbConv::new(expand, kernel, s, cin, c_out, stage_vb.pp(i.to_string()))?);
            }
            last = c_out;
        }
        let feature_dim = 4 * last;
        let top = ConvBn::seq(last, feature_dim, 1, 1, 1, features.pp("8"))?;
        Ok(Self {
            stem,
            blocks,
            top,
            feature_dim,
        })
    }
}

impl FeatureExtractor for EfficientNet {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.stem.forward_t(x, train)?.silu()?;
        for b in &self.blocks {
            x = b.forward_t(&x, train)?;
        }
        let x = self.top.forward_t(&x, train)?.silu()?;
        global_avg_pool(&x)
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }
}
