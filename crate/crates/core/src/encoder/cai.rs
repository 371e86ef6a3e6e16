//! Cross attention and invertible (CAI) detail branch.
//!
//! `Phi_in = PConv(Dense(x)) + PConv(Sobel(x))` is split into two channel
//! groups, each group attends to the other through channel cross attention,
//! and an affine coupling mixes the results:
//!
//! ```text
//! F1' = F1 * exp(clamp(psi_a(F2))) + psi_a(F2)
//! F2' = F2 + psi_b(F1')
//! ```
//!
//! The second step reads the updated `F1'`, which is what makes the pair
//! exactly invertible (see [`Coupling::uncouple`]).

use candle_core::{Module, Tensor};
use candle_nn::{init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    channel_attention, conv, from_heads, gelu, smooth_clamp, to_heads, Bottleneck, ChannelNorm,
    Conv, DepthwiseConv,
};
use crate::sobel::sobel_gradient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaiConfig {
    /// Channels in the first group; the rest form the second.
    pub split: usize,
    pub heads: usize,
    pub exp_clamp: f64,
    pub dense_layers: usize,
    pub dense_growth: usize,
    /// Hidden width of the coupling bottlenecks.
    pub bottleneck: usize,
}

impl Default for CaiConfig {
    fn default() -> Self {
        Self {
            split: 32,
            heads: 8,
            exp_clamp: 5.0,
            dense_layers: 3,
            dense_growth: 32,
            bottleneck: 32,
        }
    }
}

impl CaiConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.split == 0 || self.split >= channels {
            return Err(invalid!(
                "split {} must lie strictly inside 0..{channels}",
                self.split
            ));
        }
        if self.heads == 0
            || !self.split.is_multiple_of(self.heads)
            || !(channels - self.split).is_multiple_of(self.heads)
        {
            return Err(invalid!(
                "{} heads must divide both channel groups ({} and {})",
                self.heads,
                self.split,
                channels - self.split
            ));
        }
        if !(self.exp_clamp > 0.0) {
            return Err(invalid!("exp_clamp must be positive"));
        }
        if self.dense_layers == 0 || self.dense_growth == 0 || self.bottleneck == 0 {
            return Err(invalid!("dense and bottleneck widths must be positive"));
        }
        Ok(())
    }
}

/// Densely connected 3x3 convolutions fused by a pointwise convolution.
#[derive(Debug, Clone)]
struct DenseStem {
    layers: Vec<Conv>,
    fuse: Conv,
}

impl DenseStem {
    fn new(vb: VarBuilder, channels: usize, layers: usize, growth: usize) -> Result<Self> {
        let layers_v = (0..layers)
            .map(|i| conv(vb.pp(format!("layer{i}")), channels + i * growth, growth, 3))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers: layers_v,
            fuse: conv(vb.pp("fuse"), channels + layers * growth, channels, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for l in &self.layers {
            let y = gelu(&l.forward(&Tensor::cat(&feats, 1)?)?)?;
            feats.push(y);
        }
        Ok(self.fuse.forward(&Tensor::cat(&feats, 1)?)?)
    }
}

#[derive(Debug, Clone)]
struct AttentionInput {
    norm: ChannelNorm,
    qkv: Conv,
    dw: DepthwiseConv,
}

impl AttentionInput {
    fn new(vb: VarBuilder, width: usize) -> Result<Self> {
        Ok(Self {
            norm: ChannelNorm::new(vb.pp("norm"), width)?,
            qkv: conv(vb.pp("qkv"), width, 3 * width, 1)?,
            dw: DepthwiseConv::new(vb.pp("qkv_dw"), 3 * width, 3)?,
        })
    }

    fn qkv(&self, x: &Tensor, heads: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let c = x.dim(1)?;
        let t = self
            .dw
            .forward(&self.qkv.forward(&self.norm.forward(x)?)?)?;
        let part = |i: usize| -> Result<Tensor> {
            Ok(to_heads(&t.narrow(1, i * c, c)?.contiguous()?, heads)?)
        };
        Ok((part(0)?, part(1)?, part(2)?))
    }
}

/// Two-way channel cross attention: group one's values are mixed by the
/// attention of group two's queries against group one's keys, and vice
/// versa.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    heads: usize,
    a: AttentionInput,
    b: AttentionInput,
    temperature_a: Tensor,
    temperature_b: Tensor,
    proj_a: Conv,
    proj_b: Conv,
}

impl CrossAttention {
    pub fn new(vb: VarBuilder, width_a: usize, width_b: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            a: AttentionInput::new(vb.pp("a"), width_a)?,
            b: AttentionInput::new(vb.pp("b"), width_b)?,
            temperature_a: vb.get_with_hints(heads, "temperature_a", init::ONE)?,
            temperature_b: vb.get_with_hints(heads, "temperature_b", init::ONE)?,
            proj_a: conv(vb.pp("proj_a"), width_b, width_a, 1)?,
            proj_b: conv(vb.pp("proj_b"), width_a, width_b, 1)?,
        })
    }

    /// Attention weights `(A1, A2)`: `A1 = softmax(Q2 K1^T / T)` and
    /// `A2 = softmax(Q1 K2^T / T)`, each `B x heads x rows x cols`.
    pub fn attention_weights(&self, fa: &Tensor, fb: &Tensor) -> Result<(Tensor, Tensor)> {
        let (q1, k1, _) = self.a.qkv(fa, self.heads)?;
        let (q2, k2, _) = self.b.qkv(fb, self.heads)?;
        Ok((
            channel_attention(&q2, &k1, &self.temperature_a)?,
            channel_attention(&q1, &k2, &self.temperature_b)?,
        ))
    }

    pub fn forward(&self, fa: &Tensor, fb: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = fa.dims4()?;
        let (q1, k1, v1) = self.a.qkv(fa, self.heads)?;
        let (q2, k2, v2) = self.b.qkv(fb, self.heads)?;
        let a1 = channel_attention(&q2, &k1, &self.temperature_a)?;
        let a2 = channel_attention(&q1, &k2, &self.temperature_b)?;
        let f1 = self.proj_a.forward(&from_heads(&a1.matmul(&v1)?, h, w)?)?;
        let f2 = self.proj_b.forward(&from_heads(&a2.matmul(&v2)?, h, w)?)?;
        Ok((f1, f2))
    }
}

/// The affine coupling pair and its closed-form inverse.
#[derive(Debug, Clone)]
pub struct Coupling {
    psi_a: Bottleneck,
    psi_b: Bottleneck,
    clamp: f64,
    width_a: usize,
    width_b: usize,
}

impl Coupling {
    pub fn new(
        vb: VarBuilder,
        width_a: usize,
        width_b: usize,
        hidden: usize,
        clamp: f64,
    ) -> Result<Self> {
        Ok(Self {
            psi_a: Bottleneck::new(vb.pp("psi_a"), width_b, hidden, width_a)?,
            psi_b: Bottleneck::new(vb.pp("psi_b"), width_a, hidden, width_b)?,
            clamp,
            width_a,
            width_b,
        })
    }

    fn check(&self, f1: &Tensor, f2: &Tensor) -> Result<()> {
        let (b1, c1, h1, w1) = f1.dims4()?;
        let (b2, c2, h2, w2) = f2.dims4()?;
        if c1 != self.width_a || c2 != self.width_b || (b1, h1, w1) != (b2, h2, w2) {
            return Err(Error::ShapeMismatch {
                expected: vec![b1, self.width_a + self.width_b, h1, w1],
                actual: vec![b2, c1 + c2, h2, w2],
            });
        }
        Ok(())
    }

    pub fn couple(&self, f1: &Tensor, f2: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f1, f2)?;
        let s = self.psi_a.forward(f2)?;
        let f1p = (f1 * smooth_clamp(&s, self.clamp)?.exp()?)?.add(&s)?;
        let f2p = (f2 + self.psi_b.forward(&f1p)?)?;
        Ok((f1p, f2p))
    }

    /// Exact inverse of [`Coupling::couple`] for the same weights.
    pub fn uncouple(&self, f1p: &Tensor, f2p: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check(f1p, f2p)?;
        let f2 = (f2p - self.psi_b.forward(f1p)?)?;
        let s = self.psi_a.forward(&f2)?;
        let f1 = ((f1p - &s)? / smooth_clamp(&s, self.clamp)?.exp()?)?;
        Ok((f1, f2))
    }
}

/// Recovers the coupling inputs from its outputs.
pub fn invertible_uncouple(
    coupling: &Coupling,
    f1p: &Tensor,
    f2p: &Tensor,
) -> Result<(Tensor, Tensor)> {
    coupling.uncouple(f1p, f2p)
}

/// The detail branch. `attention` is absent in the plain-coupling variant.
#[derive(Debug, Clone)]
pub struct CaiBlock {
    stem: DenseStem,
    grad_proj: Conv,
    attention: Option<CrossAttention>,
    coupling: Coupling,
    split: usize,
    channels: usize,
}

impl CaiBlock {
    pub fn new(
        vb: VarBuilder,
        channels: usize,
        cfg: &CaiConfig,
        cross_attention: bool,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let (wa, wb) = (cfg.split, channels - cfg.split);
        Ok(Self {
            stem: DenseStem::new(vb.pp("dense"), channels, cfg.dense_layers, cfg.dense_growth)?,
            grad_proj: conv(vb.pp("grad_proj"), channels, channels, 1)?,
            attention: if cross_attention {
                Some(CrossAttention::new(vb.pp("cross"), wa, wb, cfg.heads)?)
            } else {
                None
            },
            coupling: Coupling::new(vb.pp("coupling"), wa, wb, cfg.bottleneck, cfg.exp_clamp)?,
            split: cfg.split,
            channels,
        })
    }

    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn cross_attention(&self) -> Option<&CrossAttention> {
        self.attention.as_ref()
    }

    /// `PConv(Dense(x)) + PConv(Sobel(x))`, split into the two groups.
    pub fn stem(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(invalid!(
                "detail branch expects {} channels, got {c}",
                self.channels
            ));
        }
        let phi_in = (self.stem.forward(x)? + self.grad_proj.forward(&sobel_gradient(x)?)?)?;
        Ok((
            phi_in.narrow(1, 0, self.split)?,
            phi_in.narrow(1, self.split, self.channels - self.split)?,
        ))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (fa, fb) = self.stem(x)?;
        let (f1, f2) = match &self.attention {
            Some(a) => a.forward(&fa, &fb)?,
            None => (fa, fb),
        };
        let (f1p, f2p) = self.coupling.couple(&f1, &f2)?;
        Ok(Tensor::cat(&[f1p, f2p], 1)?)
    }
}
