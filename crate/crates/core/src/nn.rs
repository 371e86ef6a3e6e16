//! Layer building blocks shared by the encoder, fusion layers and decoder.

use candle_core::{Module, Tensor, D};
use candle_nn::{init, VarBuilder};

use crate::error::Result;
use crate::kernels;

/// Logistic sigmoid; a fused kernel whose backward reuses the output, so it
/// stays finite for inputs of any magnitude.
pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

/// Softmax over the last dimension. The max shift is detached: softmax is
/// shift invariant, so the gradient is unchanged.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// `c * tanh(x / c)`: smooth, monotone, bounded to `(-c, c)`.
pub fn smooth_clamp(x: &Tensor, c: f64) -> candle_core::Result<Tensor> {
    (x / c)?.tanh()? * c
}

/// L2-normalizes along the last dimension.
pub fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    x.broadcast_div(&n)
}

/// GELU, tanh approximation, as one fused kernel with an analytic backward.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    kernels::gelu(x)
}

/// Same-padded convolution with bias, computed as im2col plus one batched
/// matmul. On CPU this beats `conv2d` several times over, forward and
/// backward.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    k: usize,
}

impl Conv {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let c_out = self.weight.dim(0)?;
        let k = self.k;
        let cols = if k == 1 {
            x.reshape((b, c, h * w))?
        } else {
            kernels::im2col(x, k)?
        };
        let wm = self
            .weight
            .reshape((1, c_out, c * k * k))?
            .broadcast_as((b, c_out, c * k * k))?
            .contiguous()?;
        wm.matmul(&cols)?
            .reshape((b, c_out, h, w))?
            .broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)
    }
}

pub fn conv(vb: VarBuilder, c_in: usize, c_out: usize, k: usize) -> Result<Conv> {
    let weight = vb.get_with_hints((c_out, c_in, k, k), "weight", init::DEFAULT_KAIMING_NORMAL)?;
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let bias = vb.get_with_hints(
        c_out,
        "bias",
        init::Init::Uniform {
            lo: -bound,
            up: bound,
        },
    )?;
    Ok(Conv { weight, bias, k })
}

/// Pointwise convolution whose weight and bias start at zero.
pub fn zero_conv1x1(vb: VarBuilder, c_in: usize, c_out: usize) -> Result<Conv> {
    let weight = vb.get_with_hints((c_out, c_in, 1, 1), "weight", init::ZERO)?;
    let bias = vb.get_with_hints(c_out, "bias", init::ZERO)?;
    Ok(Conv { weight, bias, k: 1 })
}

/// Per-channel (groups = C) convolution with zero "same" padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv {
    pub fn new(vb: VarBuilder, channels: usize, k: usize) -> Result<Self> {
        let weight =
            vb.get_with_hints((channels, 1, k, k), "weight", init::DEFAULT_KAIMING_NORMAL)?;
        let bound = 1.0 / (k as f64);
        let bias = vb.get_with_hints(
            channels,
            "bias",
            init::Init::Uniform {
                lo: -bound,
                up: bound,
            },
        )?;
        Ok(Self { weight, bias })
    }
}

impl Module for DepthwiseConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let y = depthwise_conv(x, &self.weight)?;
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Depthwise convolution of `x` (B, C, H, W) with `w` (C, 1, k, k), odd k,
/// zero "same" padding. Differentiable in both arguments.
pub fn depthwise_conv(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    let (wc, one, k, k2) = w.dims4()?;
    if wc != c || one != 1 || k != k2 || k % 2 == 0 {
        candle_core::bail!(
            "depthwise kernel {:?} does not fit input {:?}",
            w.shape(),
            x.shape()
        );
    }
    kernels::depthwise(x, w)
}

/// Layer normalization across channels at every pixel.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    weight: Tensor,
    bias: Tensor,
}

impl ChannelNorm {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(channels, "weight", init::ONE)?,
            bias: vb.get_with_hints(channels, "bias", init::ZERO)?,
        })
    }
}

impl Module for ChannelNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = x.dim(1)?;
        let mu = channel_mean(x)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = channel_mean(&xc.sqr()?)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        y.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Mean over dim 1 of `B x C x H x W`, as a matmul: reducing a non-trailing
/// dimension directly is slow on CPU.
pub fn channel_mean(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let ones = Tensor::full(1.0 / c as f64, (b, 1, c), x.device())?.to_dtype(x.dtype())?;
    ones.matmul(&x.reshape((b, c, h * w))?)?
        .reshape((b, 1, h, w))
}

/// Splits `B x C x H x W` into `B x heads x C/heads x HW`.
pub(crate) fn to_heads(x: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, heads, c / heads, h * w))
}

pub(crate) fn from_heads(x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, heads, ch, _) = x.dims4()?;
    x.reshape((b, heads * ch, h, w))
}

/// Attention weights between channels:
/// `softmax(norm(q) norm(k)^T / temperature)` per head, rows over `k`'s
/// channels. Shapes `B x heads x Cq x HW` and `B x heads x Ck x HW`.
pub(crate) fn channel_attention(
    q: &Tensor,
    k: &Tensor,
    temperature: &Tensor,
) -> candle_core::Result<Tensor> {
    let heads = q.dim(1)?;
    let q = l2_normalize(q)?;
    let k = l2_normalize(k)?;
    let logits = q.matmul(&k.t()?.contiguous()?)?;
    let logits = logits.broadcast_div(&temperature.reshape((1, heads, 1, 1))?)?;
    softmax_last_dim(&logits)
}

/// Multi-Dconv head transposed attention: a C x C (per head) attention map
/// computed across channels, so its cost is linear in the pixel count.
#[derive(Debug, Clone)]
pub struct Mdta {
    heads: usize,
    temperature: Tensor,
    qkv: Conv,
    qkv_dw: DepthwiseConv,
    project_out: Conv,
}

impl Mdta {
    pub fn new(vb: VarBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            heads,
            temperature: vb.get_with_hints(heads, "temperature", init::ONE)?,
            qkv: conv(vb.pp("qkv"), dim, 3 * dim, 1)?,
            qkv_dw: DepthwiseConv::new(vb.pp("qkv_dw"), 3 * dim, 3)?,
            project_out: conv(vb.pp("project_out"), dim, dim, 1)?,
        })
    }

    fn qkv(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let c = x.dim(1)?;
        let q = to_heads(&qkv.narrow(1, 0, c)?.contiguous()?, self.heads)?;
        let k = to_heads(&qkv.narrow(1, c, c)?.contiguous()?, self.heads)?;
        let v = to_heads(&qkv.narrow(1, 2 * c, c)?.contiguous()?, self.heads)?;
        Ok((q, k, v))
    }

    /// Per-head attention weights, `B x heads x C/heads x C/heads`.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv(x)?;
        Ok(channel_attention(&q, &k, &self.temperature)?)
    }

    /// The full `B x C x C` channel attention matrix (block diagonal over
    /// heads).
    pub fn channel_attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.attention_weights(x)?;
        let (b, heads, ch, _) = a.dims4()?;
        let c = heads * ch;
        let mut rows = Vec::with_capacity(heads);
        for hd in 0..heads {
            let block = a.narrow(1, hd, 1)?.squeeze(1)?;
            let left = hd * ch;
            let right = c - left - ch;
            rows.push(block.pad_with_zeros(2, left, right)?);
        }
        Ok(Tensor::cat(&rows, 1)?.reshape((b, c, c))?)
    }
}

impl Module for Mdta {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (q, k, v) = self.qkv(x)?;
        let attn = channel_attention(&q, &k, &self.temperature)?;
        let out = from_heads(&attn.matmul(&v)?, h, w)?;
        self.project_out.forward(&out)
    }
}

/// Locally-enhanced feed forward: expand, depthwise 3x3, GELU, project.
#[derive(Debug, Clone)]
pub struct Leff {
    project_in: Conv,
    dw: DepthwiseConv,
    project_out: Conv,
}

impl Leff {
    pub fn new(vb: VarBuilder, dim: usize, expansion: f64) -> Result<Self> {
        let hidden = ((dim as f64) * expansion).round().max(1.0) as usize;
        Ok(Self {
            project_in: conv(vb.pp("project_in"), dim, hidden, 1)?,
            dw: DepthwiseConv::new(vb.pp("dw"), hidden, 3)?,
            project_out: conv(vb.pp("project_out"), hidden, dim, 1)?,
        })
    }
}

impl Module for Leff {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.dw.forward(&self.project_in.forward(x)?)?;
        self.project_out.forward(&gelu(&h)?)
    }
}

/// Pre-norm transformer block: MDTA then LeFF, each with a residual.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm1: ChannelNorm,
    attn: Mdta,
    norm2: ChannelNorm,
    ffn: Leff,
}

impl TransformerBlock {
    pub fn new(vb: VarBuilder, dim: usize, heads: usize, expansion: f64) -> Result<Self> {
        Ok(Self {
            norm1: ChannelNorm::new(vb.pp("norm1"), dim)?,
            attn: Mdta::new(vb.pp("attn"), dim, heads)?,
            norm2: ChannelNorm::new(vb.pp("norm2"), dim)?,
            ffn: Leff::new(vb.pp("ffn"), dim, expansion)?,
        })
    }

    pub fn attention(&self) -> &Mdta {
        &self.attn
    }

    /// Attention map of the block's (normalized) input.
    pub fn channel_attention_map(&self, x: &Tensor) -> Result<Tensor> {
        self.attn.channel_attention_map(&self.norm1.forward(x)?)
    }
}

impl Module for TransformerBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        &x + self.ffn.forward(&self.norm2.forward(&x)?)?
    }
}

/// Bottleneck block used as the coupling function `psi`: pointwise reduce,
/// depthwise 3x3, pointwise expand. The last layer starts at zero so a fresh
/// block outputs exactly zero.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    reduce: Conv,
    dw: DepthwiseConv,
    expand: Conv,
}

impl Bottleneck {
    pub fn new(vb: VarBuilder, c_in: usize, hidden: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            reduce: conv(vb.pp("reduce"), c_in, hidden, 1)?,
            dw: DepthwiseConv::new(vb.pp("dw"), hidden, 3)?,
            expand: zero_conv1x1(vb.pp("expand"), hidden, c_out)?,
        })
    }
}

impl Module for Bottleneck {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = gelu(&self.reduce.forward(x)?)?;
        let h = gelu(&self.dw.forward(&h)?)?;
        self.expand.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let dw = DepthwiseConv::new(vb, 4, 3).unwrap();
        let x = randn(&[2, 4, 7, 9], 1);
        let ours = dw.forward(&x).unwrap();
        let reference = x
            .conv2d(&dw.weight, 1, 1, 1, 4)
            .unwrap()
            .broadcast_add(&dw.bias.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let d = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn conv_matches_conv2d() {
        for k in [1, 3, 5] {
            let vm = VarMap::new();
            let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
            let c = conv(vb, 3, 5, k).unwrap();
            let x = randn(&[2, 3, 4, 6], 6);
            let reference = x
                .conv2d(c.weight(), k / 2, 1, 1, 1)
                .unwrap()
                .broadcast_add(&c.bias().reshape((1, 5, 1, 1)).unwrap())
                .unwrap();
            let d = (c.forward(&x).unwrap() - reference)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap();
            let d = d.to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "k={k}: {d}");
        }
    }

    #[test]
    fn channel_mean_matches_reduction() {
        let x = randn(&[2, 5, 3, 4], 8);
        let d = (channel_mean(&x).unwrap() - x.mean_keepdim(1).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        let x = Tensor::new(&[-1000f32, -1.0, 0.0, 1.0, 1000.0], &Device::Cpu).unwrap();
        let s = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s[2], 0.5);
        assert!((s[3] - 1.0 / (1.0 + (-1f32).exp())).abs() < 1e-6);
        assert!(s.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = (randn(&[3, 5, 7], 2) * 20.0).unwrap();
        let s = softmax_last_dim(&x).unwrap().sum(D::Minus1).unwrap();
        for v in s.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_norm_standardizes_pixels() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let n = ChannelNorm::new(vb, 6).unwrap();
        let y = n.forward(&randn(&[1, 6, 3, 3], 3)).unwrap();
        let mean = y
            .mean(1)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(mean < 1e-10);
    }

    #[test]
    fn fresh_bottleneck_outputs_zero() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let b = Bottleneck::new(vb, 4, 3, 4).unwrap();
        let y = b.forward(&randn(&[1, 4, 5, 5], 4)).unwrap();
        assert_eq!(
            y.abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn attention_map_is_resolution_independent() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let m = Mdta::new(vb, 8, 2).unwrap();
        for side in [8, 16] {
            let a = m
                .channel_attention_map(&randn(&[1, 8, side, side], 5))
                .unwrap();
            assert_eq!(a.dims(), &[1, 8, 8]);
            // Off-diagonal head blocks are zero, rows still sum to one.
            let rows = a
                .sum(2)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-9));
            let corner = a
                .get(0)
                .unwrap()
                .get(0)
                .unwrap()
                .get(7)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert_eq!(corner, 0.0);
        }
    }
}
