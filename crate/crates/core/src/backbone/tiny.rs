//! Small three-stage CNN for CPU-scale experiments and tests.

use candle_core::{Result, Tensor};
use candle_nn::VarBuilder;

use super::layers::{global_avg_pool, ConvBn};
use super::FeatureExtractor;

pub const TINY_FEATURES: usize = 32;

pub struct TinyCnn {
    stages: Vec<ConvBn>,
}

impl TinyCnn {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let widths = [3, 8, 16, TINY_FEATURES];
        let stages = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBn::seq(w[0], w[1], 3, 2, 1, vb.pp(format!("stages.{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }
}

impl FeatureExtractor for TinyCnn {
    fn features(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, s) in self.stages.iter().enumerate() {
            x = s.forward_t(&x, train)?.relu()?;
            if i == 0 {
                x = x.max_pool2d(2)?;
            }
        }
        global_avg_pool(&x)
    }

    fn feature_dim(&self) -> usize {
        TINY_FEATURES
    }
}
