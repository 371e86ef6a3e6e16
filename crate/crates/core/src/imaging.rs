//! Image tensors and the pre/post-processing shared by the network, the
//! training pipeline and the metrics.
//!
//! Every image is a `B x C x H x W` tensor with intensities in `[0, 1]`.
//! Colour handling follows the full-range BT.601 convention: the network
//! only ever sees luminance, chroma is carried around it.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GenericImageView};
use ndarray::Array2;

use crate::error::{invalid, Error, Result};

/// Smallest spatial extent accepted for an image.
pub const MIN_SIDE: usize = 8;

/// Spatial multiple the network needs (deepest graph pooling factor).
pub const NETWORK_MULTIPLE: usize = 8;

/// BT.601 luminance weights, shared by grey conversion and YCbCr.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ChannelLayout {
    Gray1,
    Rgb3,
    YCbCr3,
}

impl ChannelLayout {
    pub fn channels(self) -> usize {
        match self {
            ChannelLayout::Gray1 => 1,
            ChannelLayout::Rgb3 | ChannelLayout::YCbCr3 => 3,
        }
    }
}

/// A batch of images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
    layout: ChannelLayout,
}

impl ImageTensor {
    /// Wraps `data`, checking rank, channel count, minimum size, finiteness
    /// and the `[0, 1]` range.
    pub fn new(data: Tensor, layout: ChannelLayout) -> Result<Self> {
        let (_, c, h, w) = data
            .dims4()
            .map_err(|_| invalid!("image tensor must be B x C x H x W, got {:?}", data.dims()))?;
        if c != layout.channels() {
            return Err(invalid!(
                "{layout:?} expects {} channels, tensor has {c}",
                layout.channels()
            ));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(invalid!(
                "image is {h}x{w}, minimum is {MIN_SIDE}x{MIN_SIDE}"
            ));
        }
        let values = data.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(bad) = values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(invalid!("image value {bad} outside [0, 1]"));
        }
        Ok(Self { data, layout })
    }

    /// Wraps a tensor known to satisfy the invariants (e.g. a sigmoid output).
    pub(crate) fn new_unchecked(data: Tensor, layout: ChannelLayout) -> Self {
        Self { data, layout }
    }

    /// Builds a `1 x 1 x H x W` grey image from a plane of intensities.
    pub fn from_plane(plane: &Array2<f64>, device: &Device) -> Result<Self> {
        let (h, w) = plane.dim();
        let data: Vec<f32> = plane.iter().map(|&v| v as f32).collect();
        Self::new(
            Tensor::from_vec(data, (1, 1, h, w), device)?,
            ChannelLayout::Gray1,
        )
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn layout(&self) -> ChannelLayout {
        self.layout
    }

    /// `(batch, channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        // Validated as rank 4 on construction.
        self.data.dims4().expect("rank-4 image tensor")
    }

    pub fn height(&self) -> usize {
        self.dims().2
    }

    pub fn width(&self) -> usize {
        self.dims().3
    }

    /// Channel `c` of batch item `b` as an `H x W` plane of f64.
    pub fn plane(&self, b: usize, c: usize) -> Result<Array2<f64>> {
        let (_, _, h, w) = self.dims();
        let v = self
            .data
            .get(b)?
            .get(c)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(Array2::from_shape_vec((h, w), v).expect("plane shape"))
    }

    /// Luminance of an RGB image, or a clone of a grey one.
    pub fn to_gray(&self) -> Result<Self> {
        match self.layout {
            ChannelLayout::Gray1 => Ok(self.clone()),
            ChannelLayout::Rgb3 => {
                let y = weighted_channels(&self.data, LUMA_WEIGHTS, 0.0)?;
                Ok(Self::new_unchecked(
                    y.clamp(0f32, 1f32)?,
                    ChannelLayout::Gray1,
                ))
            }
            ChannelLayout::YCbCr3 => Ok(Self::new_unchecked(
                self.data.narrow(1, 0, 1)?,
                ChannelLayout::Gray1,
            )),
        }
    }
}

fn weighted_channels(t: &Tensor, w: [f64; 3], offset: f64) -> Result<Tensor> {
    let r = t.narrow(1, 0, 1)?;
    let g = t.narrow(1, 1, 1)?;
    let b = t.narrow(1, 2, 1)?;
    Ok((((r * w[0])? + (g * w[1])?)? + ((b * w[2])? + offset)?)?)
}

/// Loads a raster as a `1 x C x H x W` tensor in the requested layout.
///
/// 8-bit data is scaled by 255 and 16-bit data by 65535. RGB sources asked
/// for as [`ChannelLayout::Gray1`] are reduced with the BT.601 weights.
pub fn load_image(path: impl AsRef<Path>, layout: ChannelLayout) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    from_dynamic(&img, layout)
}

/// Decodes an in-memory image; see [`load_image`].
pub fn from_dynamic(img: &DynamicImage, layout: ChannelLayout) -> Result<ImageTensor> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(invalid!("zero-sized image"));
    }
    let (w, h) = (w as usize, h as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let is_float = matches!(
        img,
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_)
    );
    let color = img.color().has_color();

    // Planar RGB in [0,1].
    let rgb: Vec<f32> = if is_float {
        let buf = img.to_rgb32f();
        planar(buf.as_raw(), w * h, |v| v.clamp(0.0, 1.0))
    } else if sixteen {
        let buf = img.to_rgb16();
        planar(buf.as_raw(), w * h, |v| v as f32 / 65535.0)
    } else {
        let buf = img.to_rgb8();
        planar(buf.as_raw(), w * h, |v| v as f32 / 255.0)
    };
    let rgb = Tensor::from_vec(rgb, (1, 3, h, w), &Device::Cpu)?;

    let data = match layout {
        ChannelLayout::Rgb3 => rgb,
        ChannelLayout::Gray1 if !color => rgb.narrow(1, 0, 1)?.contiguous()?,
        ChannelLayout::Gray1 => weighted_channels(&rgb, LUMA_WEIGHTS, 0.0)?.clamp(0f32, 1f32)?,
        ChannelLayout::YCbCr3 => {
            let rgb = ImageTensor::new_unchecked(rgb, ChannelLayout::Rgb3);
            rgb_to_ycbcr(&rgb)?.into_tensor()
        }
    };
    ImageTensor::new(data, layout)
}

fn planar<T: Copy>(interleaved: &[T], n: usize, f: impl Fn(T) -> f32) -> Vec<f32> {
    let mut out = vec![0f32; 3 * n];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        out[i] = f(px[0]);
        out[n + i] = f(px[1]);
        out[2 * n + i] = f(px[2]);
    }
    out
}

/// Writes batch item 0 as an 8-bit PNG (grey or RGB).
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (_, _, h, w) = img.dims();
    let rgb;
    let src = match img.layout() {
        ChannelLayout::YCbCr3 => {
            rgb = ycbcr_to_rgb(img)?;
            &rgb
        }
        _ => img,
    };
    let quantize = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = match src.layout() {
        ChannelLayout::Gray1 => {
            let p = src.plane(0, 0)?;
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(
                    w as u32,
                    h as u32,
                    p.iter().map(|&v| quantize(v)).collect(),
                )
                .expect("buffer size"),
            )
        }
        _ => {
            let planes = [src.plane(0, 0)?, src.plane(0, 1)?, src.plane(0, 2)?];
            let mut buf = Vec::with_capacity(3 * w * h);
            for (r, (g, b)) in planes[0].iter().zip(planes[1].iter().zip(planes[2].iter())) {
                buf.extend([quantize(*r), quantize(*g), quantize(*b)]);
            }
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"),
            )
        }
    };
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Full-range BT.601 RGB to YCbCr, chroma offset by 0.5.
pub fn rgb_to_ycbcr(img: &ImageTensor) -> Result<ImageTensor> {
    if img.layout() != ChannelLayout::Rgb3 {
        return Err(invalid!("rgb_to_ycbcr expects RGB, got {:?}", img.layout()));
    }
    let t = img.tensor();
    let y = weighted_channels(t, LUMA_WEIGHTS, 0.0)?;
    let cb = weighted_channels(t, [-0.168_736, -0.331_264, 0.5], 0.5)?;
    let cr = weighted_channels(t, [0.5, -0.418_688, -0.081_312], 0.5)?;
    let out = Tensor::cat(&[y, cb, cr], 1)?.clamp(0f32, 1f32)?;
    Ok(ImageTensor::new_unchecked(out, ChannelLayout::YCbCr3))
}

/// Inverse of [`rgb_to_ycbcr`], clamped back into `[0, 1]`.
pub fn ycbcr_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    if img.layout() != ChannelLayout::YCbCr3 {
        return Err(invalid!(
            "ycbcr_to_rgb expects YCbCr, got {:?}",
            img.layout()
        ));
    }
    let t = img.tensor();
    let y = t.narrow(1, 0, 1)?;
    let cb = (t.narrow(1, 1, 1)? - 0.5)?;
    let cr = (t.narrow(1, 2, 1)? - 0.5)?;
    let r = (&y + (&cr * 1.402)?)?;
    let g = ((&y - (&cb * 0.344_136)?)? - (&cr * 0.714_136)?)?;
    let b = (&y + (&cb * 1.772)?)?;
    let out = Tensor::cat(&[r, g, b], 1)?.clamp(0f32, 1f32)?;
    Ok(ImageTensor::new_unchecked(out, ChannelLayout::Rgb3))
}

/// Replaces the luminance of a YCbCr image, keeping its chroma.
pub fn with_luminance(ycbcr: &ImageTensor, y: &ImageTensor) -> Result<ImageTensor> {
    if ycbcr.layout() != ChannelLayout::YCbCr3 || y.layout() != ChannelLayout::Gray1 {
        return Err(invalid!("with_luminance expects (YCbCr, Gray) images"));
    }
    let chroma = ycbcr.tensor().narrow(1, 1, 2)?;
    let out = Tensor::cat(&[y.tensor().to_dtype(chroma.dtype())?, chroma], 1)?;
    Ok(ImageTensor::new_unchecked(out, ChannelLayout::YCbCr3))
}

/// Square patch size and stride in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(invalid!("patch size and stride must be positive"));
        }
        Ok(Self { size, stride })
    }

    /// Patches along one axis of length `len`.
    pub fn count_along(&self, len: usize) -> usize {
        if self.size > len {
            0
        } else {
            (len - self.size) / self.stride + 1
        }
    }
}

/// Cuts `img` into square patches in row-major order.
pub fn crop_patches(img: &ImageTensor, spec: PatchSpec) -> Result<Vec<ImageTensor>> {
    let spec = PatchSpec::new(spec.size, spec.stride)?;
    let (_, _, h, w) = img.dims();
    if spec.size > h || spec.size > w {
        return Err(invalid!("patch size {} exceeds image {h}x{w}", spec.size));
    }
    let (rows, cols) = (spec.count_along(h), spec.count_along(w));
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let patch = img
                .tensor()
                .narrow(2, r * spec.stride, spec.size)?
                .narrow(3, c * spec.stride, spec.size)?
                .contiguous()?;
            out.push(ImageTensor::new_unchecked(patch, img.layout()));
        }
    }
    Ok(out)
}

/// Reflects an out-of-range index back into `0..n` (edge pixel not repeated).
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads a tensor on the bottom/right by reflection to `(h, w)`.
pub(crate) fn reflect_pad_to(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, h0, w0) = t.dims4()?;
    let mut out = t.clone();
    if h != h0 {
        let idx: Vec<u32> = (0..h).map(|i| reflect_index(i, h0) as u32).collect();
        out = out.index_select(&Tensor::new(idx, t.device())?, 2)?;
    }
    if w != w0 {
        let idx: Vec<u32> = (0..w).map(|i| reflect_index(i, w0) as u32).collect();
        out = out.index_select(&Tensor::new(idx, t.device())?, 3)?;
    }
    Ok(out)
}

/// Original `(height, width)` of a padded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OriginalDims {
    pub height: usize,
    pub width: usize,
}

/// Reflect-pads `img` so both sides are multiples of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> Result<(ImageTensor, OriginalDims)> {
    if m == 0 {
        return Err(invalid!("padding multiple must be at least 1"));
    }
    let (_, _, h, w) = img.dims();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let data = reflect_pad_to(img.tensor(), hp, wp)?;
    Ok((
        ImageTensor::new_unchecked(data, img.layout()),
        OriginalDims {
            height: h,
            width: w,
        },
    ))
}

/// Crops the top-left `dims` region, undoing [`pad_to_multiple`].
pub fn crop_to(img: &ImageTensor, dims: OriginalDims) -> Result<ImageTensor> {
    let (_, _, h, w) = img.dims();
    if dims.height > h || dims.width > w {
        return Err(invalid!(
            "crop {}x{} larger than image {h}x{w}",
            dims.height,
            dims.width
        ));
    }
    let t = img
        .tensor()
        .narrow(2, 0, dims.height)?
        .narrow(3, 0, dims.width)?
        .contiguous()?;
    Ok(ImageTensor::new_unchecked(t, img.layout()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray_png(
        dir: &Path,
        name: &str,
        w: u32,
        h: u32,
        f: impl Fn(u32, u32) -> u8,
    ) -> std::path::PathBuf {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
        let p = dir.join(name);
        img.save(&p).unwrap();
        p
    }

    fn rand_rgb(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
        ImageTensor::new(
            Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap(),
            ChannelLayout::Rgb3,
        )
        .unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    }

    #[test]
    fn loads_extremes_and_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let white = load_image(
            gray_png(dir.path(), "w.png", 9, 8, |_, _| 255),
            ChannelLayout::Gray1,
        )
        .unwrap();
        assert!(white.plane(0, 0).unwrap().iter().all(|&v| v == 1.0));
        let black = load_image(
            gray_png(dir.path(), "b.png", 9, 8, |_, _| 0),
            ChannelLayout::Gray1,
        )
        .unwrap();
        assert!(black.plane(0, 0).unwrap().iter().all(|&v| v == 0.0));
        let mid = load_image(
            gray_png(dir.path(), "m.png", 8, 8, |_, _| 128),
            ChannelLayout::Gray1,
        )
        .unwrap();
        assert!((mid.plane(0, 0).unwrap()[[3, 3]] - 128.0 / 255.0).abs() < 1e-6);
        assert_eq!(white.dims(), (1, 1, 8, 9));
    }

    #[test]
    fn sixteen_bit_normalizes_by_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_fn(8, 8, |x, _| {
            image::Luma([if x < 4 { 65535 } else { 32768 }])
        });
        let p = dir.path().join("d.png");
        img.save(&p).unwrap();
        let t = load_image(&p, ChannelLayout::Gray1).unwrap();
        let plane = t.plane(0, 0).unwrap();
        assert!((plane[[0, 0]] - 1.0).abs() < 1e-6);
        assert!((plane[[0, 7]] - 32768.0 / 65535.0).abs() < 1e-6);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/definitely/not/here.png", ChannelLayout::Gray1).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn rgb_loads_as_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(8, 8, |_, _| image::Rgb([255, 0, 0]));
        let p = dir.path().join("red.png");
        img.save(&p).unwrap();
        let t = load_image(&p, ChannelLayout::Gray1).unwrap();
        assert!((t.plane(0, 0).unwrap()[[0, 0]] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn white_and_black_ycbcr() {
        let dev = Device::Cpu;
        for (v, y) in [(1f32, 1.0f64), (0.0, 0.0)] {
            let rgb = ImageTensor::new(
                Tensor::full(v, (1, 3, 8, 8), &dev).unwrap(),
                ChannelLayout::Rgb3,
            )
            .unwrap();
            let ycc = rgb_to_ycbcr(&rgb).unwrap();
            assert!((ycc.plane(0, 0).unwrap()[[2, 2]] - y).abs() < 1e-6);
            assert!((ycc.plane(0, 1).unwrap()[[2, 2]] - 0.5).abs() < 1e-6);
            assert!((ycc.plane(0, 2).unwrap()[[2, 2]] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn ycbcr_rejects_wrong_layout() {
        let g = ImageTensor::new(
            Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap(),
            ChannelLayout::Gray1,
        )
        .unwrap();
        assert!(rgb_to_ycbcr(&g).is_err());
        assert!(ycbcr_to_rgb(&g).is_err());
    }

    #[test]
    fn patch_counts() {
        let dev = Device::Cpu;
        let mk = |h, w| {
            ImageTensor::new(
                Tensor::zeros((1, 1, h, w), DType::F32, &dev).unwrap(),
                ChannelLayout::Gray1,
            )
            .unwrap()
        };
        assert_eq!(
            crop_patches(&mk(256, 256), PatchSpec::new(128, 128).unwrap())
                .unwrap()
                .len(),
            4
        );
        assert_eq!(
            crop_patches(&mk(300, 460), PatchSpec::new(128, 64).unwrap())
                .unwrap()
                .len(),
            18
        );
        assert!(crop_patches(&mk(100, 300), PatchSpec::new(128, 64).unwrap()).is_err());
        assert!(PatchSpec::new(0, 1).is_err());

        let img = rand_rgb(128, 128, 3);
        let one = crop_patches(&img, PatchSpec::new(128, 128).unwrap()).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(max_abs_diff(one[0].tensor(), img.tensor()), 0.0);
    }

    #[test]
    fn patches_are_row_major() {
        let dev = Device::Cpu;
        let v: Vec<f32> = (0..16 * 16).map(|i| i as f32 / 255.0).collect();
        let img = ImageTensor::new(
            Tensor::from_vec(v, (1, 1, 16, 16), &dev).unwrap(),
            ChannelLayout::Gray1,
        )
        .unwrap();
        let p = crop_patches(&img, PatchSpec::new(8, 8).unwrap()).unwrap();
        let first = |t: &ImageTensor| t.plane(0, 0).unwrap()[[0, 0]];
        assert_eq!(first(&p[1]), (8.0f32 / 255.0) as f64);
        assert_eq!(first(&p[2]), (128.0f32 / 255.0) as f64);
    }

    #[test]
    fn pad_dims() {
        let dev = Device::Cpu;
        let mk = |h, w| {
            ImageTensor::new(
                Tensor::zeros((1, 1, h, w), DType::F32, &dev).unwrap(),
                ChannelLayout::Gray1,
            )
            .unwrap()
        };
        let (p, d) = pad_to_multiple(&mk(480, 640), 8).unwrap();
        assert_eq!((p.height(), p.width()), (480, 640));
        assert_eq!(
            d,
            OriginalDims {
                height: 480,
                width: 640
            }
        );
        let (p, _) = pad_to_multiple(&mk(97, 143), 8).unwrap();
        assert_eq!((p.height(), p.width()), (104, 144));
    }

    #[test]
    fn reflection_does_not_repeat_edge() {
        assert_eq!(
            (0..7).map(|i| reflect_index(i, 4)).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 2, 1, 0]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ycbcr_round_trip(seed in any::<u64>(), h in 8usize..20, w in 8usize..20) {
            let img = rand_rgb(h, w, seed);
            let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
            prop_assert!(max_abs_diff(back.tensor(), img.tensor()) < 1e-3);
        }

        #[test]
        fn patch_count_formula(h in 8usize..80, w in 8usize..80, size in 1usize..40, stride in 1usize..20) {
            prop_assume!(size <= h.min(w));
            let img = ImageTensor::new(Tensor::zeros((1, 1, h, w), DType::F32, &Device::Cpu).unwrap(), ChannelLayout::Gray1).unwrap();
            let n = crop_patches(&img, PatchSpec::new(size, stride).unwrap()).unwrap().len();
            prop_assert_eq!(n, ((h - size) / stride + 1) * ((w - size) / stride + 1));
        }

        #[test]
        fn pad_then_crop_is_identity(seed in any::<u64>(), h in 8usize..30, w in 8usize..30, m in 1usize..12) {
            let img = rand_rgb(h, w, seed);
            let (padded, dims) = pad_to_multiple(&img, m).unwrap();
            prop_assert_eq!(padded.height() % m, 0);
            prop_assert_eq!(padded.width() % m, 0);
            prop_assert!(padded.height() - h < m && padded.width() - w < m);
            let back = crop_to(&padded, dims).unwrap();
            prop_assert_eq!(max_abs_diff(back.tensor(), img.tensor()), 0.0);
        }

        #[test]
        fn loaded_values_in_unit_range(seed in any::<u64>(), w in 8u32..24, h in 8u32..24) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = image::RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
            let dyn_img = DynamicImage::ImageRgb8(img);
            for layout in [ChannelLayout::Gray1, ChannelLayout::Rgb3, ChannelLayout::YCbCr3] {
                let t = from_dynamic(&dyn_img, layout).unwrap();
                let v = t.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
                prop_assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
            }
        }
    }
}
