//! Training objectives for both stages.
//!
//! Every norm is mean-reduced over elements, so loss magnitudes do not
//! depend on patch size.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fusion::FeatureTriplet;
use crate::sobel::sobel_gradient;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            actual: b.dims().to_vec(),
        });
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Window size used for an `h x w` image: 11, or the largest odd size that
/// fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Normalized 2-D Gaussian window, row-major.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            out.push(a * b);
        }
    }
    out
}

/// Mean SSIM over valid window positions (data range 1).
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    let (b, c, h, w) = x.dims4()?;
    let k = ssim_window_size(h, w);
    let win = Tensor::from_vec(gaussian_window(k, SSIM_SIGMA), (1, 1, k, k), x.device())?
        .to_dtype(x.dtype())?;
    let x = x.reshape((b * c, 1, h, w))?;
    let y = y.reshape((b * c, 1, h, w))?;
    let filt = |t: &Tensor| t.conv2d(&win, 0, 1, 1, 1);
    let mx = filt(&x)?;
    let my = filt(&y)?;
    let mx2 = mx.sqr()?;
    let my2 = my.sqr()?;
    let mxy = (&mx * &my)?;
    let sxx = (filt(&x.sqr()?)? - &mx2)?;
    let syy = (filt(&y.sqr()?)? - &my2)?;
    let sxy = (filt(&(&x * &y)?)? - &mxy)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let num = (((mxy * 2.0)? + c1)? * ((sxy * 2.0)? + c2)?)?;
    let den = (((mx2 + my2)? + c1)? * ((sxx + syy)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `1 - SSIM(x, y)`.
pub fn ssim_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok(ssim(x, y)?.affine(-1.0, 1.0)?)
}

/// `mean | |grad x| - |grad y| |` with Sobel magnitudes.
pub fn grad_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    Ok((sobel_gradient(x)? - sobel_gradient(y)?)?
        .abs()?
        .mean_all()?)
}

/// Lifts every channel to 16 channels: a 4-level average-pooled pyramid
/// (factors 1, 2, 4, 8, each resampled back to full size) split into its
/// four 2x2 polyphase slices. Requires sides divisible by 8.
pub fn pyramid_lift(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 8 != 0 || w % 8 != 0 {
        return Err(invalid!(
            "pyramid lift needs sides divisible by 8, got {h}x{w}"
        ));
    }
    let mut levels = vec![x.clone()];
    for f in [2usize, 4, 8] {
        levels.push(x.avg_pool2d(f)?.upsample_nearest2d(h, w)?);
    }
    // B x 4C x H x W -> B x 4C x H/2 x 2 x W/2 x 2 -> B x 16C x H/2 x W/2
    let p = Tensor::cat(&levels, 1)?;
    let p = p
        .reshape((b, 4 * c, h / 2, 2, w / 2, 2))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, 16 * c, h / 2, w / 2))?;
    Ok(p)
}

/// `G = F F^T / (C H W)` for `F` of shape `B x C x (H W)`.
pub fn gram_matrix(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.reshape((b, c, h * w))?;
    let g = flat.matmul(&flat.t()?.contiguous()?)?;
    Ok((g / (c * h * w) as f64)?)
}

/// Mean squared difference of the Gram matrices of the lifted images.
pub fn semantic_gram_loss(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    let gx = gram_matrix(&pyramid_lift(x)?)?;
    let gy = gram_matrix(&pyramid_lift(y)?)?;
    Ok((gx - gy)?.sqr()?.mean_all()?)
}

/// Variance (per element) below which an input counts as constant.
pub const CC_DEGENERATE_VARIANCE: f64 = 1e-12;
const CC_DENOMINATOR_FLOOR: f64 = 1e-24;

/// Pearson correlation over all elements of each batch item, averaged over
/// the batch. A constant input contributes 0.
pub fn correlation_coefficient(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    let n = a.dim(0)?;
    let a = a.reshape((n, ()))?;
    let b = b.reshape((n, ()))?;
    let ac = a.broadcast_sub(&a.mean_keepdim(1)?)?;
    let bc = b.broadcast_sub(&b.mean_keepdim(1)?)?;
    let (saa, sbb) = (ac.sqr()?.sum(1)?, bc.sqr()?.sum(1)?);
    let num = (&ac * &bc)?.sum(1)?;
    let den = ((&saa * &sbb)? + CC_DENOMINATOR_FLOOR)?.sqrt()?;
    // Samples where either side is (near) constant contribute exactly 0.
    let floor = CC_DEGENERATE_VARIANCE * a.dim(1)? as f64;
    let live = (saa.gt(floor)?.to_dtype(a.dtype())? * sbb.gt(floor)?.to_dtype(a.dtype())?)?;
    Ok(((num / den)? * live)?.mean(0)?)
}

/// Correlation value plus whether either argument was (near) constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn correlation(a: &Tensor, b: &Tensor) -> Result<Correlation> {
    let value = scalar(&correlation_coefficient(a, b)?)?;
    let n = a.dim(0)?;
    let var = |t: &Tensor| -> Result<Vec<f64>> {
        let t = t.to_dtype(DType::F64)?.reshape((n, ()))?;
        let c = t.broadcast_sub(&t.mean_keepdim(1)?)?;
        Ok(c.sqr()?.mean(D::Minus1)?.to_vec1::<f64>()?)
    };
    let degenerate = var(a)?
        .into_iter()
        .chain(var(b)?)
        .any(|v| v <= CC_DEGENERATE_VARIANCE);
    Ok(Correlation { value, degenerate })
}

/// `(CC_D^2 [+ CC_G^2]) / (CC_B + delta)`.
pub fn decomposition_loss(
    detail: (&Tensor, &Tensor),
    graph: Option<(&Tensor, &Tensor)>,
    base: (&Tensor, &Tensor),
    delta: f64,
) -> Result<Tensor> {
    let mut num = correlation_coefficient(detail.0, detail.1)?.sqr()?;
    if let Some((gv, gi)) = graph {
        num = (num + correlation_coefficient(gv, gi)?.sqr()?)?;
    }
    let den = (correlation_coefficient(base.0, base.1)? + delta)?;
    Ok((num / den)?)
}

/// Stage-I decomposition loss `CC_D^2 / (CC_B + delta)`.
pub fn decomp_loss_stage1(
    dv: &Tensor,
    di: &Tensor,
    bv: &Tensor,
    bi: &Tensor,
    delta: f64,
) -> Result<Tensor> {
    decomposition_loss((dv, di), None, (bv, bi), delta)
}

/// Stage-II decomposition loss `(CC_D^2 + CC_G^2) / (CC_B + delta)`.
pub fn decomp_loss_stage2(
    dv: &Tensor,
    di: &Tensor,
    gv: &Tensor,
    gi: &Tensor,
    bv: &Tensor,
    bi: &Tensor,
    delta: f64,
) -> Result<Tensor> {
    decomposition_loss((dv, di), Some((gv, gi)), (bv, bi), delta)
}

/// `mean | F - max(|I|, |V|) |`.
pub fn intensity_loss(f: &Tensor, i: &Tensor, v: &Tensor) -> Result<Tensor> {
    same_shape(f, i)?;
    same_shape(f, v)?;
    let target = i.abs()?.maximum(&v.abs()?)?;
    Ok((f - target)?.abs()?.mean_all()?)
}

/// `mean | |grad F| - max(|grad I|, |grad V|) |`.
pub fn fusion_grad_loss(f: &Tensor, i: &Tensor, v: &Tensor) -> Result<Tensor> {
    same_shape(f, i)?;
    same_shape(f, v)?;
    let target = sobel_gradient(i)?.maximum(&sobel_gradient(v)?)?;
    Ok((sobel_gradient(f)? - target)?.abs()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Stage-I decomposition weight.
    pub alpha1: f64,
    /// SSIM weight in the reconstruction terms.
    pub beta1: f64,
    /// Gradient weight in the reconstruction terms.
    pub beta2: f64,
    /// Stage-II gradient weight.
    pub alpha2: f64,
    /// Stage-II decomposition weight.
    pub alpha3: f64,
    /// Denominator offset of the decomposition losses.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 2.0,
            beta1: 8.0,
            beta2: 10.0,
            alpha2: 10.0,
            alpha3: 2.0,
            delta: 1.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 1.0) {
            return Err(invalid!(
                "delta must exceed 1 (got {}) so the denominator stays positive",
                self.delta
            ));
        }
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!(
                    "loss weight {name} must be a finite value >= 0, got {v}"
                ));
            }
        }
        Ok(())
    }
}

/// Which optional terms enter the totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    /// Gram-matrix term on the infrared reconstruction.
    pub semantic: bool,
    /// Graph correlation in the stage-I decomposition loss.
    pub graph_cc_stage1: bool,
    /// Graph correlation in the stage-II decomposition loss.
    pub graph_cc_stage2: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            semantic: true,
            graph_cc_stage1: false,
            graph_cc_stage2: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// Named loss terms and their weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    pub fn push(&mut self, name: &str, weight: f64, value: f64) {
        self.terms.push(LossTerm {
            name: name.to_string(),
            weight,
            value,
        });
    }

    pub fn total(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn names(&self) -> Vec<&str> {
        self.terms.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.terms.iter().all(|t| t.value.is_finite())
    }

    /// Element-wise mean of reports with identical term lists.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let mut out = first.clone();
        for (i, t) in out.terms.iter_mut().enumerate() {
            t.value = reports.iter().map(|r| r.terms[i].value).sum::<f64>() / reports.len() as f64;
        }
        Some(out)
    }
}

/// Differentiable total plus its per-term report.
#[derive(Debug, Clone)]
pub struct WeightedLoss {
    pub total: Tensor,
    pub report: LossReport,
}

struct Accumulator {
    total: Option<Tensor>,
    report: LossReport,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            total: None,
            report: LossReport::default(),
        }
    }

    fn add(&mut self, name: &str, weight: f64, term: Tensor) -> Result<()> {
        self.report.push(name, weight, scalar(&term)?);
        let w = (term * weight)?;
        self.total = Some(match self.total.take() {
            Some(t) => (t + w)?,
            None => w,
        });
        Ok(())
    }

    fn finish(self) -> WeightedLoss {
        WeightedLoss {
            total: self.total.expect("at least one loss term"),
            report: self.report,
        }
    }
}

fn graph_pair<'a>(
    v: &'a FeatureTriplet,
    i: &'a FeatureTriplet,
    enabled: bool,
) -> Option<(&'a Tensor, &'a Tensor)> {
    match (enabled, &v.graph, &i.graph) {
        (true, Some(a), Some(b)) => Some((a, b)),
        _ => None,
    }
}

/// Stage-I objective: visible and infrared reconstruction plus the weighted
/// decomposition loss.
#[allow(clippy::too_many_arguments)]
pub fn stage1_total(
    vis: &Tensor,
    vis_hat: &Tensor,
    ir: &Tensor,
    ir_hat: &Tensor,
    feats_vis: &FeatureTriplet,
    feats_ir: &FeatureTriplet,
    w: &LossWeights,
    switches: &LossSwitches,
) -> Result<WeightedLoss> {
    let mut acc = Accumulator::new();
    acc.add("ssim_vis", w.beta1, ssim_loss(vis, vis_hat)?)?;
    acc.add("grad_vis", w.beta2, grad_loss(vis, vis_hat)?)?;
    if switches.semantic {
        acc.add("semantic_ir", 1.0, semantic_gram_loss(ir, ir_hat)?)?;
    }
    acc.add("ssim_ir", w.beta1, ssim_loss(ir, ir_hat)?)?;
    acc.add("grad_ir", w.beta2, grad_loss(ir, ir_hat)?)?;
    let decomp = decomposition_loss(
        (&feats_vis.detail, &feats_ir.detail),
        graph_pair(feats_vis, feats_ir, switches.graph_cc_stage1),
        (&feats_vis.base, &feats_ir.base),
        w.delta,
    )?;
    acc.add("decomp", w.alpha1, decomp)?;
    Ok(acc.finish())
}

/// Stage-II objective: intensity and max-gradient terms plus the weighted
/// decomposition loss.
pub fn stage2_total(
    fused: &Tensor,
    vis: &Tensor,
    ir: &Tensor,
    feats_vis: &FeatureTriplet,
    feats_ir: &FeatureTriplet,
    w: &LossWeights,
    switches: &LossSwitches,
) -> Result<WeightedLoss> {
    let mut acc = Accumulator::new();
    acc.add("intensity", 1.0, intensity_loss(fused, ir, vis)?)?;
    acc.add("grad", w.alpha2, fusion_grad_loss(fused, ir, vis)?)?;
    let decomp = decomposition_loss(
        (&feats_vis.detail, &feats_ir.detail),
        graph_pair(feats_vis, feats_ir, switches.graph_cc_stage2),
        (&feats_vis.base, &feats_ir.base),
        w.delta,
    )?;
    acc.add("decomp", w.alpha3, decomp)?;
    Ok(acc.finish())
}
