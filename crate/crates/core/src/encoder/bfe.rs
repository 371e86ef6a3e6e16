use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{conv, Conv, TransformerBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BfeConfig {
    pub blocks_per_group: usize,
    pub groups: usize,
    pub ffn_expansion: f64,
    pub heads: usize,
}

impl Default for BfeConfig {
    fn default() -> Self {
        Self {
            blocks_per_group: 2,
            groups: 2,
            ffn_expansion: 2.0,
            heads: 8,
        }
    }
}

impl BfeConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.blocks_per_group == 0
            || self.groups == 0
            || self.heads == 0
            || self.ffn_expansion <= 0.0
        {
            return Err(invalid!("base branch sizes must be positive: {self:?}"));
        }
        if !channels.is_multiple_of(self.heads) {
            return Err(invalid!(
                "{} heads do not divide {channels} channels",
                self.heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResidualGroup {
    blocks: Vec<TransformerBlock>,
    conv: Conv,
}

/// Base feature extraction: residual groups `F <- Conv(blocks(F)) + F` of
/// channel-attention transformer blocks.
#[derive(Debug, Clone)]
pub struct BaseFeatures {
    groups: Vec<ResidualGroup>,
    residual: bool,
}

impl BaseFeatures {
    /// `residual = false` drops the group skips (plain stacked blocks).
    pub fn new(vb: VarBuilder, channels: usize, cfg: &BfeConfig, residual: bool) -> Result<Self> {
        cfg.validate(channels)?;
        let groups = (0..cfg.groups)
            .map(|g| {
                let gvb = vb.pp(format!("group{g}"));
                let blocks = (0..cfg.blocks_per_group)
                    .map(|b| {
                        TransformerBlock::new(
                            gvb.pp(format!("block{b}")),
                            channels,
                            cfg.heads,
                            cfg.ffn_expansion,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ResidualGroup {
                    blocks,
                    conv: conv(gvb.pp("conv"), channels, channels, 3)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { groups, residual })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut f = x.clone();
        for g in &self.groups {
            let mut y = f.clone();
            for b in &g.blocks {
                y = b.forward(&y)?;
            }
            let y = g.conv.forward(&y)?;
            f = if self.residual { (y + &f)? } else { y };
        }
        Ok(f)
    }

    /// Channel attention matrix (`B x C x C`) of the first block on `x`.
    pub fn channel_attention_map(&self, x: &Tensor) -> Result<Tensor> {
        self.groups[0].blocks[0].channel_attention_map(x)
    }
}
