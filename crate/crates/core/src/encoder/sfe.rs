use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;

use crate::error::{invalid, Result};
use crate::nn::{conv, Conv, TransformerBlock};

/// Shallow feature extraction: a 3x3 convolution lifting the single input
/// channel to the feature width, followed by one transformer block.
#[derive(Debug, Clone)]
pub struct ShallowFeatures {
    embed: Conv,
    block: TransformerBlock,
}

impl ShallowFeatures {
    pub fn new(vb: VarBuilder, channels: usize, heads: usize, expansion: f64) -> Result<Self> {
        Ok(Self {
            embed: conv(vb.pp("embed"), 1, channels, 3)?,
            block: TransformerBlock::new(vb.pp("block"), channels, heads, expansion)?,
        })
    }

    /// Output of the embedding convolution alone.
    pub fn embed(&self, img: &Tensor) -> Result<Tensor> {
        Ok(self.embed.forward(img)?)
    }

    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let c = img.dim(1)?;
        if c != 1 {
            return Err(invalid!("shallow features expect one channel, got {c}"));
        }
        Ok(self.block.forward(&self.embed.forward(img)?)?)
    }
}
