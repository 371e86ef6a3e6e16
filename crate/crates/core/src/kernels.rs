//! Hand-written CPU kernels with explicit backward passes, for ops that are
//! slow when composed from generic tensor primitives. Inputs are made
//! contiguous before entering a kernel; f32 and f64 are supported.

use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor, WithDType,
};

fn slice<'a, T>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => bail!("kernel input is not contiguous"),
    }
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    match *l.dims() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref d => bail!("expected a 4-D input, got {d:?}"),
    }
}

/// Visits every in-bounds row segment of a `k x k` zero-padded stencil over
/// an `h x w` plane: `f(tap, dst_row, src_row, j0, j1, ox)` where output
/// columns `j0..j1` read source columns `j0+ox..j1+ox`.
fn for_each_tap(
    h: usize,
    w: usize,
    k: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, isize),
) {
    let p = (k / 2) as isize;
    for dy in 0..k {
        for dx in 0..k {
            let (oy, ox) = (dy as isize - p, dx as isize - p);
            let j0 = (-ox).max(0) as usize;
            let j1 = (w as isize - ox.max(0)).max(j0 as isize) as usize;
            for i in 0..h {
                let si = i as isize + oy;
                if si >= 0 && si < h as isize {
                    f(dy * k + dx, i, si as usize, j0, j1, ox);
                }
            }
        }
    }
}

fn axpy<T: WithDType>(dst: &mut [T], src: &[T], a: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s;
    }
}

fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn shifted(j0: usize, j1: usize, ox: isize) -> std::ops::Range<usize> {
    (j0 as isize + ox) as usize..(j1 as isize + ox) as usize
}

macro_rules! float_pair {
    ($s1:expr, $s2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32($a), CpuStorage::F32($b)) => CpuStorage::F32($body),
            (CpuStorage::F64($a), CpuStorage::F64($b)) => CpuStorage::F64($body),
            _ => bail!("kernels support matching f32 or f64 inputs"),
        }
    };
}

macro_rules! float_one {
    ($s:expr, |$a:ident| $body:expr) => {
        match $s {
            CpuStorage::F32($a) => CpuStorage::F32($body),
            CpuStorage::F64($a) => CpuStorage::F64($body),
            _ => bail!("kernels support f32 or f64 inputs"),
        }
    };
}

// ---- depthwise convolution -------------------------------------------------

/// Depthwise convolution, zero "same" padding. `x` is `B x C x H x W`, `w` is
/// `C x 1 x k x k` with odd `k`.
pub fn depthwise(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise)
}

struct Depthwise;
struct DepthwiseInputGrad;
struct DepthwiseWeightGrad {
    k: usize,
}

/// out[b,c,i,j] = sum of w[c,t] * x[b,c,i+dy-p,j+dx-p]; with `flip` the
/// kernel is mirrored, which yields the input gradient.
fn dw_apply<T: WithDType>(
    x: &[T],
    w: &[T],
    (n, c, h, wd): (usize, usize, usize, usize),
    k: usize,
    flip: bool,
) -> Vec<T> {
    let kk = k * k;
    let mut out = vec![T::zero(); x.len()];
    for plane in 0..n * c {
        let ch = plane % c;
        let xs = &x[plane * h * wd..(plane + 1) * h * wd];
        let os = &mut out[plane * h * wd..(plane + 1) * h * wd];
        for_each_tap(h, wd, k, |t, i, si, j0, j1, ox| {
            let tap = w[ch * kk + if flip { kk - 1 - t } else { t }];
            axpy(
                &mut os[i * wd + j0..i * wd + j1],
                &xs[si * wd..(si + 1) * wd][shifted(j0, j1, ox)],
                tap,
            );
        });
    }
    out
}

fn dw_weight_grad<T: WithDType>(
    x: &[T],
    g: &[T],
    (n, c, h, wd): (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let kk = k * k;
    let mut gw = vec![T::zero(); c * kk];
    for plane in 0..n * c {
        let ch = plane % c;
        let xs = &x[plane * h * wd..(plane + 1) * h * wd];
        let gs = &g[plane * h * wd..(plane + 1) * h * wd];
        for_each_tap(h, wd, k, |t, i, si, j0, j1, ox| {
            gw[ch * kk + t] += dot(
                &gs[i * wd + j0..i * wd + j1],
                &xs[si * wd..(si + 1) * wd][shifted(j0, j1, ox)],
            );
        });
    }
    gw
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let (c, one, k, k2) = dims4(l2)?;
        if c != dims.1 || one != 1 || k != k2 || k % 2 == 0 {
            bail!(
                "depthwise kernel {:?} does not fit input {:?}",
                l2.dims(),
                l1.dims()
            );
        }
        let out = float_pair!(s1, s2, |x, w| dw_apply(
            slice(x, l1)?,
            slice(w, l2)?,
            dims,
            k,
            false
        ));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        g: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let g = g.contiguous()?;
        let gx = g.apply_op2_no_bwd(w, &DepthwiseInputGrad)?;
        let gw = x.apply_op2_no_bwd(&g, &DepthwiseWeightGrad { k: w.dim(2)? })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for DepthwiseInputGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let k = l2.dims()[2];
        let out = float_pair!(s1, s2, |g, w| dw_apply(
            slice(g, l1)?,
            slice(w, l2)?,
            dims,
            k,
            true
        ));
        Ok((out, l1.shape().clone()))
    }
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let k = self.k;
        let out = float_pair!(s1, s2, |x, g| dw_weight_grad(
            slice(x, l1)?,
            slice(g, l2)?,
            dims,
            k
        ));
        Ok((out, Shape::from((dims.1, 1, k, k))))
    }
}

// ---- im2col ----------------------------------------------------------------

/// Unfolds zero-padded `k x k` neighbourhoods: `B x C x H x W` becomes
/// `B x (C k k) x (H W)`, row `(c k + dy) k + dx`. Differentiable.
pub fn im2col(x: &Tensor, k: usize) -> Result<Tensor> {
    if k.is_multiple_of(2) {
        bail!("im2col needs an odd kernel, got {k}");
    }
    x.contiguous()?.apply_op1(Im2col { k })
}

struct Im2col {
    k: usize,
}

struct Col2im {
    k: usize,
    dims: (usize, usize, usize, usize),
}

fn im2col_fwd<T: WithDType>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
) -> Vec<T> {
    let (kk, hw) = (k * k, h * w);
    let mut out = vec![T::zero(); n * c * kk * hw];
    for plane in 0..n * c {
        let xs = &x[plane * hw..(plane + 1) * hw];
        let base = plane * kk * hw;
        for_each_tap(h, w, k, |t, i, si, j0, j1, ox| {
            let row = base + t * hw + i * w;
            out[row + j0..row + j1].copy_from_slice(&xs[si * w..(si + 1) * w][shifted(j0, j1, ox)]);
        });
    }
    out
}

fn col2im<T: WithDType>(g: &[T], (n, c, h, w): (usize, usize, usize, usize), k: usize) -> Vec<T> {
    let (kk, hw) = (k * k, h * w);
    let mut out = vec![T::zero(); n * c * hw];
    for plane in 0..n * c {
        let os = &mut out[plane * hw..(plane + 1) * hw];
        let base = plane * kk * hw;
        for_each_tap(h, w, k, |t, i, si, j0, j1, ox| {
            let row = base + t * hw + i * w;
            axpy(
                &mut os[si * w..(si + 1) * w][shifted(j0, j1, ox)],
                &g[row + j0..row + j1],
                T::one(),
            );
        });
    }
    out
}

impl CustomOp1 for Im2col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l)?;
        let k = self.k;
        let out = float_one!(s, |x| im2col_fwd(slice(x, l)?, dims, k));
        Ok((out, Shape::from((dims.0, dims.1 * k * k, dims.2 * dims.3))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, g: &Tensor) -> Result<Option<Tensor>> {
        let dims = x.dims4()?;
        Ok(Some(
            g.contiguous()?
                .apply_op1_no_bwd(&Col2im { k: self.k, dims })?,
        ))
    }
}

impl CustomOp1 for Col2im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (k, dims) = (self.k, self.dims);
        let out = float_one!(s, |g| col2im(slice(g, l)?, dims, k));
        Ok((out, Shape::from(dims)))
    }
}

// ---- GELU ------------------------------------------------------------------

/// GELU, tanh approximation, with an analytic backward.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.apply_op1(Gelu)
}

struct Gelu;
struct GeluSlope;

/// sqrt(2 / pi), to f64 precision.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

macro_rules! gelu_fns {
    ($t:ty, $value:ident, $slope:ident) => {
        fn $value(x: $t) -> $t {
            let u: $t = GELU_SCALE as $t * (x + 0.044_715 * x * x * x);
            // tanh through exp: far cheaper than the libm call and exact at
            // both saturation ends.
            let t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
            0.5 * x * (1.0 + t)
        }

        fn $slope(x: $t) -> $t {
            let u: $t = GELU_SCALE as $t * (x + 0.044_715 * x * x * x);
            let t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
            0.5 * (1.0 + t)
                + 0.5 * x * (1.0 - t * t) * GELU_SCALE as $t * (1.0 + 3.0 * 0.044_715 * x * x)
        }
    };
}

gelu_fns!(f32, gelu_f32, gelu_slope_f32);
gelu_fns!(f64, gelu_f64, gelu_slope_f64);

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(slice(v, l)?.iter().map(|&x| gelu_f32(x)).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(slice(v, l)?.iter().map(|&x| gelu_f64(x)).collect())
            }
            _ => bail!("gelu supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, g: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some((x.contiguous()?.apply_op1_no_bwd(&GeluSlope)? * g)?))
    }
}

impl CustomOp1 for GeluSlope {
    fn name(&self) -> &'static str {
        "gelu-tanh-slope"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(slice(v, l)?.iter().map(|&x| gelu_slope_f32(x)).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(slice(v, l)?.iter().map(|&x| gelu_slope_f64(x)).collect())
            }
            _ => bail!("gelu supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        crate::params::randn(shape.to_vec(), seed, candle_core::DType::F64, &Device::Cpu).unwrap()
    }

    fn max_abs(t: Tensor) -> f64 {
        t.abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn im2col_matches_padded_slices() {
        let x = randn(&[2, 3, 5, 4], 1);
        let cols = im2col(&x, 3).unwrap();
        let xp = x
            .pad_with_zeros(2, 1, 1)
            .unwrap()
            .pad_with_zeros(3, 1, 1)
            .unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = xp
                    .narrow(2, dy, 5)
                    .unwrap()
                    .narrow(3, dx, 4)
                    .unwrap()
                    .reshape((2, 3, 20))
                    .unwrap();
                let rows: Vec<_> = (0..3)
                    .map(|c| cols.narrow(1, c * 9 + dy * 3 + dx, 1).unwrap())
                    .collect();
                let got = Tensor::cat(&rows, 1).unwrap();
                assert_eq!(max_abs((got - tap).unwrap()), 0.0);
            }
        }
    }

    #[test]
    fn im2col_backward_is_the_adjoint() {
        // <im2col(x), g> = <x, col2im(g)> for every x and g.
        let x = Var::from_tensor(&randn(&[1, 2, 4, 6], 2)).unwrap();
        let g = randn(&[1, 50, 24], 3);
        let y = im2col(&x, 5).unwrap();
        let lhs = (&y * &g).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let rhs = (x.as_tensor() * grads.get(&x).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let d = (lhs.to_scalar::<f64>().unwrap() - rhs.to_scalar::<f64>().unwrap()).abs();
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn depthwise_gradients_match_grouped_conv() {
        let x = Var::from_tensor(&randn(&[2, 3, 6, 5], 3)).unwrap();
        let w = Var::from_tensor(&randn(&[3, 1, 3, 3], 4)).unwrap();
        let probe = randn(&[2, 3, 6, 5], 5);
        let loss = |y: Tensor| (y * &probe).unwrap().sum_all().unwrap();
        assert!(
            max_abs((depthwise(&x, &w).unwrap() - x.conv2d(&w, 1, 1, 1, 3).unwrap()).unwrap())
                < 1e-12
        );
        let ours = loss(depthwise(&x, &w).unwrap()).backward().unwrap();
        let reference = loss(x.conv2d(&w, 1, 1, 1, 3).unwrap()).backward().unwrap();
        for v in [x.as_tensor(), w.as_tensor()] {
            assert!(max_abs((ours.get(v).unwrap() - reference.get(v).unwrap()).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn gelu_matches_candle_and_finite_differences() {
        let x = Var::from_tensor(&(randn(&[4, 50], 9) * 4.0).unwrap()).unwrap();
        assert!(max_abs((gelu(&x).unwrap() - x.gelu().unwrap()).unwrap()) < 1e-12);
        let grads = gelu(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic = grads
            .get(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let reference = |v: f64| {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        let h = 1e-6;
        for (a, v) in analytic.iter().zip(&xs) {
            let numeric = (reference(v + h) - reference(v - h)) / (2.0 * h);
            assert!((a - numeric).abs() < 1e-7, "x={v}: {a} vs {numeric}");
        }
        let big = Tensor::new(&[-1e4f32, 1e4], &Device::Cpu).unwrap();
        assert_eq!(
            gelu(&big).unwrap().to_vec1::<f32>().unwrap(),
            vec![0.0, 1e4]
        );
    }
}
