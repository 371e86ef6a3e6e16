//! Stage-II fusion layers and the shared decoder.

use candle_core::{Module, Tensor};
use candle_nn::{init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    conv, gelu, sigmoid, smooth_clamp, Bottleneck, Conv, DepthwiseConv, TransformerBlock,
};

/// Per-modality (or fused) decomposition. `graph` is absent when the graph
/// branch is disabled.
#[derive(Debug, Clone)]
pub struct FeatureTriplet {
    pub detail: Tensor,
    pub base: Tensor,
    pub graph: Option<Tensor>,
}

impl FeatureTriplet {
    pub fn streams(&self) -> Vec<&Tensor> {
        let mut s = vec![&self.detail, &self.base];
        if let Some(g) = &self.graph {
            s.push(g);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.detail.dims();
        for s in self.streams() {
            if s.dims() != d {
                return Err(Error::ShapeMismatch {
                    expected: d.to_vec(),
                    actual: s.dims().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetailFusionConfig {
    pub layers: usize,
    pub exp_clamp: f64,
    pub bottleneck: usize,
    /// Swap which half plays which role on every other layer.
    pub alternate_halves: bool,
}

impl Default for DetailFusionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            exp_clamp: 5.0,
            bottleneck: 32,
            alternate_halves: true,
        }
    }
}

/// One cross-modal mixing layer:
/// `out1 = (x1 - psi1(x2)) * exp(-a psi1(x2))`,
/// `out2 = (x2 - psi2(x1)) * exp(-a psi2(x1))`, both from the layer inputs.
#[derive(Debug, Clone)]
pub struct DetailLayer {
    psi1: Bottleneck,
    psi2: Bottleneck,
    scale: Tensor,
    clamp: f64,
}

impl DetailLayer {
    fn new(vb: VarBuilder, channels: usize, hidden: usize, clamp: f64) -> Result<Self> {
        Ok(Self {
            psi1: Bottleneck::new(vb.pp("psi1"), channels, hidden, channels)?,
            psi2: Bottleneck::new(vb.pp("psi2"), channels, hidden, channels)?,
            scale: vb.get_with_hints(1, "scale", init::ONE)?,
            clamp,
        })
    }

    fn half(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let arg = smooth_clamp(&s.broadcast_mul(&self.scale.neg()?)?, self.clamp)?;
        Ok(((x - s)? * arg.exp()?)?)
    }

    pub fn forward(&self, x1: &Tensor, x2: &Tensor) -> Result<(Tensor, Tensor)> {
        same_shape(x1, x2)?;
        let s2 = self.psi1.forward(x2)?;
        let s1 = self.psi2.forward(x1)?;
        Ok((self.half(x1, &s2)?, self.half(x2, &s1)?))
    }
}

/// Stacked [`DetailLayer`]s; the last two layers' outputs are concatenated
/// and projected back to the feature width.
#[derive(Debug, Clone)]
pub struct DetailFusion {
    layers: Vec<DetailLayer>,
    project: Conv,
    alternate: bool,
}

impl DetailFusion {
    pub fn new(vb: VarBuilder, channels: usize, cfg: &DetailFusionConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(invalid!("detail fusion needs at least one layer"));
        }
        let layers = (0..cfg.layers)
            .map(|i| {
                DetailLayer::new(
                    vb.pp(format!("layer{i}")),
                    channels,
                    cfg.bottleneck,
                    cfg.exp_clamp,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let kept = cfg.layers.min(2);
        Ok(Self {
            layers,
            project: conv(vb.pp("project"), kept * 2 * channels, channels, 1)?,
            alternate: cfg.alternate_halves,
        })
    }

    pub fn layer(&self, i: usize) -> &DetailLayer {
        &self.layers[i]
    }

    /// Outputs `(out1, out2)` of every layer.
    pub fn layer_outputs(&self, a: &Tensor, b: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        same_shape(a, b)?;
        let (mut x1, mut x2) = (a.clone(), b.clone());
        let mut outs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (o1, o2) = if self.alternate && i % 2 == 1 {
                let (o2, o1) = layer.forward(&x2, &x1)?;
                (o1, o2)
            } else {
                layer.forward(&x1, &x2)?
            };
            outs.push((o1.clone(), o2.clone()));
            x1 = o1;
            x2 = o2;
        }
        Ok(outs)
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let outs = self.layer_outputs(a, b)?;
        let start = outs.len().saturating_sub(2);
        let mut parts = Vec::new();
        for (o1, o2) in &outs[start..] {
            parts.push(o1.clone());
            parts.push(o2.clone());
        }
        Ok(self.project.forward(&Tensor::cat(&parts, 1)?)?)
    }
}

/// Sum of the two inputs through one transformer block.
#[derive(Debug, Clone)]
pub struct BaseFusion {
    block: TransformerBlock,
}

impl BaseFusion {
    pub fn new(vb: VarBuilder, channels: usize, heads: usize, expansion: f64) -> Result<Self> {
        Ok(Self {
            block: TransformerBlock::new(vb.pp("block"), channels, heads, expansion)?,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b)?;
        Ok(self.block.forward(&(a + b)?)?)
    }
}

/// Channel concatenation followed by a pointwise convolution.
#[derive(Debug, Clone)]
pub struct GraphFusion {
    project: Conv,
}

impl GraphFusion {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            project: conv(vb.pp("project"), 2 * channels, channels, 1)?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        self.project.weight()
    }

    pub fn bias(&self) -> &Tensor {
        self.project.bias()
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b)?;
        Ok(self.project.forward(&Tensor::cat(&[a, b], 1)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Add,
    Concat,
}

/// Margin keeping decoder outputs strictly inside `(0, 1)` even when the
/// sigmoid saturates in single precision.
const OUTPUT_MARGIN: f64 = 1e-6;

/// Aggregation, transformer block, three depthwise 3x3 convolutions, a
/// pointwise projection to one channel and a sigmoid.
#[derive(Debug, Clone)]
pub struct Decoder {
    reduce: Option<Conv>,
    block: TransformerBlock,
    dw: [DepthwiseConv; 3],
    out: Conv,
    streams: usize,
    channels: usize,
}

impl Decoder {
    pub fn new(
        vb: VarBuilder,
        channels: usize,
        heads: usize,
        expansion: f64,
        streams: usize,
        aggregate: Aggregate,
    ) -> Result<Self> {
        let reduce = match aggregate {
            Aggregate::Add => None,
            Aggregate::Concat => Some(conv(vb.pp("reduce"), streams * channels, channels, 1)?),
        };
        Ok(Self {
            reduce,
            block: TransformerBlock::new(vb.pp("block"), channels, heads, expansion)?,
            dw: [
                DepthwiseConv::new(vb.pp("dw0"), channels, 3)?,
                DepthwiseConv::new(vb.pp("dw1"), channels, 3)?,
                DepthwiseConv::new(vb.pp("dw2"), channels, 3)?,
            ],
            out: conv(vb.pp("out"), channels, 1, 1)?,
            streams,
            channels,
        })
    }

    /// Channels entering the decoder after aggregation.
    pub fn input_channels(&self) -> usize {
        match self.reduce {
            Some(_) => self.streams * self.channels,
            None => self.channels,
        }
    }

    pub fn aggregate(&self, t: &FeatureTriplet) -> Result<Tensor> {
        t.validate()?;
        let streams = t.streams();
        if streams.len() != self.streams {
            return Err(invalid!(
                "decoder expects {} streams, got {}",
                self.streams,
                streams.len()
            ));
        }
        match &self.reduce {
            None => {
                let mut acc = streams[0].clone();
                for s in &streams[1..] {
                    acc = (acc + *s)?;
                }
                Ok(acc)
            }
            Some(reduce) => Ok(reduce.forward(&Tensor::cat(&streams, 1)?)?),
        }
    }

    pub fn decode(&self, t: &FeatureTriplet) -> Result<Tensor> {
        let x = self.block.forward(&self.aggregate(t)?)?;
        let x = gelu(&self.dw[0].forward(&x)?)?;
        let x = gelu(&self.dw[1].forward(&x)?)?;
        let x = self.out.forward(&self.dw[2].forward(&x)?)?;
        Ok(((sigmoid(&x)? * (1.0 - 2.0 * OUTPUT_MARGIN))? + OUTPUT_MARGIN)?)
    }
}
