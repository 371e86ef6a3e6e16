//! Reference-free and reference-based fusion quality metrics.
//!
//! Planes are `f64` arrays on the 0-255 scale. Histogram-based metrics
//! quantize by rounding to the nearest 8-bit level.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{load_image, ChannelLayout, ImageTensor};
use crate::losses::{gaussian_window, ssim_window_size, SSIM_K1, SSIM_K2, SSIM_SIGMA};

const LEVELS: usize = 256;

/// How the two per-source SSIM values are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub vif: f64,
    pub qabf: f64,
    pub ag: f64,
    pub ssim: f64,
    pub scd: f64,
}

pub const METRIC_NAMES: [&str; 9] = ["EN", "SD", "SF", "MI", "VIF", "Qabf", "AG", "SSIM", "SCD"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.en, self.sd, self.sf, self.mi, self.vif, self.qabf, self.ag, self.ssim, self.scd,
        ]
    }

    fn from_values(v: [f64; 9]) -> Self {
        Self {
            en: v[0],
            sd: v[1],
            sf: v[2],
            mi: v[3],
            vif: v[4],
            qabf: v[5],
            ag: v[6],
            ssim: v[7],
            scd: v[8],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 9];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / reports.len() as f64)))
    }
}

fn quantize(v: f64) -> usize {
    v.round().clamp(0.0, 255.0) as usize
}

fn histogram(x: ArrayView2<f64>) -> [f64; LEVELS] {
    let mut h = [0.0; LEVELS];
    for &v in x.iter() {
        h[quantize(v)] += 1.0;
    }
    h
}

/// Shannon entropy of the 256-level histogram, in bits.
pub fn entropy(x: ArrayView2<f64>) -> f64 {
    let n = x.len() as f64;
    -histogram(x)
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Entropy of a single-channel image with values in `[0, 1]`.
pub fn image_entropy(img: &ImageTensor) -> Result<f64> {
    let p = gray_plane(img)?;
    Ok(entropy(p.view()))
}

/// Population standard deviation.
pub fn standard_deviation(x: ArrayView2<f64>) -> f64 {
    x.std(0.0)
}

/// `sqrt(RF^2 + CF^2)` with forward differences along rows and columns.
pub fn spatial_frequency(x: ArrayView2<f64>) -> f64 {
    let (h, w) = x.dim();
    let rf = if w > 1 {
        let d = &x.slice(s![.., 1..]) - &x.slice(s![.., ..w - 1]);
        d.mapv(|v| v * v).mean().unwrap_or(0.0)
    } else {
        0.0
    };
    let cf = if h > 1 {
        let d = &x.slice(s![1.., ..]) - &x.slice(s![..h - 1, ..]);
        d.mapv(|v| v * v).mean().unwrap_or(0.0)
    } else {
        0.0
    };
    (rf + cf).sqrt()
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` over the `(H-1) x (W-1)` grid of
/// forward differences.
pub fn average_gradient(x: ArrayView2<f64>) -> f64 {
    let (h, w) = x.dim();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let base = x.slice(s![..h - 1, ..w - 1]);
    let dx = &x.slice(s![..h - 1, 1..]) - &base;
    let dy = &x.slice(s![1.., ..w - 1]) - &base;
    Zip::from(&dx)
        .and(&dy)
        .map_collect(|a, b| ((a * a + b * b) / 2.0).sqrt())
        .mean()
        .unwrap_or(0.0)
}

/// Mutual information in nats from the 256x256 joint histogram.
pub fn mutual_information(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0.0; LEVELS * LEVELS];
    for (&x, &y) in a.iter().zip(b.iter()) {
        joint[quantize(x) * LEVELS + quantize(y)] += 1.0;
    }
    let ha = histogram(a);
    let hb = histogram(b);
    let mut mi = 0.0;
    for i in 0..LEVELS {
        if ha[i] == 0.0 {
            continue;
        }
        for j in 0..LEVELS {
            let c = joint[i * LEVELS + j];
            if c > 0.0 {
                mi += c / n * (c * n / (ha[i] * hb[j])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// 2-D correlation keeping only positions where the kernel fits.
pub fn filter_valid(x: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = k.dim();
    if kh > h || kw > w {
        return Array2::zeros((0, 0));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = Array2::zeros((oh, ow));
    for ((i, j), v) in out.indexed_iter_mut() {
        let win = x.slice(s![i..i + kh, j..j + kw]);
        *v = Zip::from(&win).and(&k).fold(0.0, |acc, a, b| acc + a * b);
    }
    out
}

fn gaussian_kernel(size: usize, sigma: f64) -> Array2<f64> {
    Array2::from_shape_vec((size, size), gaussian_window(size, sigma)).expect("square window")
}

/// Gaussian-windowed SSIM (window 11, sigma 1.5, valid positions) for data
/// on the 0-255 scale.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let (h, w) = a.dim();
    let k = gaussian_kernel(ssim_window_size(h, w), SSIM_SIGMA);
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let mu_a = filter_valid(a, k.view());
    let mu_b = filter_valid(b, k.view());
    let saa = filter_valid((&a * &a).view(), k.view()) - &mu_a * &mu_a;
    let sbb = filter_valid((&b * &b).view(), k.view()) - &mu_b * &mu_b;
    let sab = filter_valid((&a * &b).view(), k.view()) - &mu_a * &mu_b;
    let mut acc = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&saa)
        .and(&sbb)
        .and(&sab)
        .for_each(|ma, mb, va, vb, cab| {
            acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    acc / mu_a.len() as f64
}

const VIF_NOISE_VAR: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

/// Pixel-domain multi-scale visual information fidelity of `dist` with
/// respect to `reference`. Scales whose image is smaller than the window are
/// skipped; a reference without variance gives 0.
pub fn vif(reference: ArrayView2<f64>, dist: ArrayView2<f64>) -> f64 {
    let mut r = reference.to_owned();
    let mut d = dist.to_owned();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (4 - scale + 1)) + 1;
        let win = gaussian_kernel(n, n as f64 / 5.0);
        if scale > 1 {
            r = filter_valid(r.view(), win.view())
                .slice(s![..;2, ..;2])
                .to_owned();
            d = filter_valid(d.view(), win.view())
                .slice(s![..;2, ..;2])
                .to_owned();
        }
        if r.nrows() < n || r.ncols() < n {
            break;
        }
        let mu1 = filter_valid(r.view(), win.view());
        let mu2 = filter_valid(d.view(), win.view());
        let s11 = filter_valid((&r * &r).view(), win.view()) - &mu1 * &mu1;
        let s22 = filter_valid((&d * &d).view(), win.view()) - &mu2 * &mu2;
        let s12 = filter_valid((&r * &d).view(), win.view()) - &mu1 * &mu2;
        Zip::from(&s11)
            .and(&s22)
            .and(&s12)
            .for_each(|&s1, &s2, &c| {
                let mut s1 = s1.max(0.0);
                let s2 = s2.max(0.0);
                let mut g = c / (s1 + VIF_EPS);
                let mut sv = s2 - g * c;
                if s1 < VIF_EPS {
                    g = 0.0;
                    sv = s2;
                    s1 = 0.0;
                }
                if s2 < VIF_EPS {
                    g = 0.0;
                    sv = 0.0;
                }
                if g < 0.0 {
                    sv = s2;
                    g = 0.0;
                }
                if sv <= VIF_EPS {
                    sv = VIF_EPS;
                }
                num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
                den += (1.0 + s1 / VIF_NOISE_VAR).log10();
            });
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Sobel strength and orientation with zero padding.
fn edge_field(x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let at = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x[[i as usize, j as usize]]
        }
    };
    let mut g = Array2::zeros((h, w));
    let mut a = Array2::zeros((h, w));
    for i in 0..h as isize {
        for j in 0..w as isize {
            let sx = (at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1))
                - (at(i - 1, j - 1) + 2.0 * at(i, j - 1) + at(i + 1, j - 1));
            let sy = (at(i - 1, j - 1) + 2.0 * at(i - 1, j) + at(i - 1, j + 1))
                - (at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1));
            let idx = [i as usize, j as usize];
            g[idx] = (sx * sx + sy * sy).sqrt();
            a[idx] = if sx == 0.0 {
                std::f64::consts::FRAC_PI_2
            } else {
                (sy / sx).atan()
            };
        }
    }
    (g, a)
}

const QABF_TG: f64 = 0.9994;
const QABF_KG: f64 = -15.0;
const QABF_DG: f64 = 0.5;
const QABF_TA: f64 = 0.9879;
const QABF_KA: f64 = -22.0;
const QABF_DA: f64 = 0.8;

fn edge_preservation(
    gs: &Array2<f64>,
    as_: &Array2<f64>,
    gf: &Array2<f64>,
    af: &Array2<f64>,
) -> Array2<f64> {
    let mut q = Array2::zeros(gs.dim());
    Zip::from(&mut q)
        .and(gs)
        .and(as_)
        .and(gf)
        .and(af)
        .for_each(|q, &g, &a, &g2, &a2| {
            let gr = if g > g2 {
                g2 / g
            } else if g < g2 {
                g / g2
            } else {
                1.0
            };
            let ar = 1.0 - (a - a2).abs() / std::f64::consts::FRAC_PI_2;
            let qg = QABF_TG / (1.0 + (QABF_KG * (gr - QABF_DG)).exp());
            let qa = QABF_TA / (1.0 + (QABF_KA * (ar - QABF_DA)).exp());
            *q = qg * qa;
        });
    q
}

/// Gradient-based edge transfer `Q^{AB/F}`. Its sigmoid constants cap a
/// perfect match at about 0.975. Sources without edges give 0.
pub fn qabf(a: ArrayView2<f64>, b: ArrayView2<f64>, f: ArrayView2<f64>) -> f64 {
    let (ga, aa) = edge_field(a);
    let (gb, ab) = edge_field(b);
    let (gf, af) = edge_field(f);
    let qa = edge_preservation(&ga, &aa, &gf, &af);
    let qb = edge_preservation(&gb, &ab, &gf, &af);
    let den = ga.sum() + gb.sum();
    if den <= 0.0 {
        return 0.0;
    }
    ((&qa * &ga).sum() + (&qb * &gb).sum()) / den
}

/// Pearson correlation; 0 when either argument has no variance.
pub fn pearson(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let ma = a.mean().unwrap_or(0.0);
    let mb = b.mean().unwrap_or(0.0);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    });
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Sum of correlations of differences `r(F - V, I) + r(F - I, V)`.
pub fn scd(ir: ArrayView2<f64>, vis: ArrayView2<f64>, fused: ArrayView2<f64>) -> f64 {
    pearson((&fused - &vis).view(), ir) + pearson((&fused - &ir).view(), vis)
}

fn check_planes(f: &Array2<f64>, i: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    for p in [i, v] {
        if p.dim() != f.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![f.nrows(), f.ncols()],
                actual: vec![p.nrows(), p.ncols()],
            });
        }
    }
    Ok(())
}

/// All nine metrics from 0-255 planes.
pub fn evaluate_planes(
    fused: &Array2<f64>,
    ir: &Array2<f64>,
    vis: &Array2<f64>,
    reduction: SsimReduction,
) -> Result<MetricsReport> {
    check_planes(fused, ir, vis)?;
    let (f, i, v) = (fused.view(), ir.view(), vis.view());
    let ssim_sum = ssim(f, i) + ssim(f, v);
    Ok(MetricsReport {
        en: entropy(f),
        sd: standard_deviation(f),
        sf: spatial_frequency(f),
        mi: mutual_information(f, i) + mutual_information(f, v),
        vif: vif(i, f) + vif(v, f),
        qabf: qabf(i, v, f),
        ag: average_gradient(f),
        ssim: match reduction {
            SsimReduction::Sum => ssim_sum,
            SsimReduction::Mean => ssim_sum / 2.0,
        },
        scd: scd(i, v, f),
    })
}

/// First plane of a single-image tensor, scaled to 0-255. Colour inputs are
/// reduced to luminance first.
pub fn gray_plane(img: &ImageTensor) -> Result<Array2<f64>> {
    let (b, _, _, _) = img.dims();
    if b != 1 {
        return Err(invalid!("expected a single image, got a batch of {b}"));
    }
    Ok(img.to_gray()?.plane(0, 0)? * 255.0)
}

/// Metrics for one fused image against its two sources.
pub fn evaluate_pair(
    fused: &ImageTensor,
    ir: &ImageTensor,
    vis: &ImageTensor,
    reduction: SsimReduction,
) -> Result<MetricsReport> {
    evaluate_planes(
        &gray_plane(fused)?,
        &gray_plane(ir)?,
        &gray_plane(vis)?,
        reduction,
    )
}

/// Per-image metrics with their mean; files lacking a counterpart are
/// listed in `errors` and excluded.
#[derive(Debug, Clone, Default)]
pub struct MetricsTable {
    pub rows: Vec<(String, MetricsReport)>,
    pub errors: Vec<String>,
}

impl MetricsTable {
    pub fn mean(&self) -> Option<MetricsReport> {
        MetricsReport::mean(&self.rows.iter().map(|(_, r)| *r).collect::<Vec<_>>())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.rows.is_empty() {
            out.push_str("no pairs\n");
        } else {
            let name_w = self
                .rows
                .iter()
                .map(|(n, _)| n.len())
                .max()
                .unwrap_or(0)
                .max(5);
            let _ = write!(out, "{:<name_w$}", "image");
            for m in METRIC_NAMES {
                let _ = write!(out, " {m:>9}");
            }
            out.push('\n');
            let mean = self.mean();
            let rows = self
                .rows
                .iter()
                .map(|(n, r)| (n.as_str(), r))
                .chain(mean.iter().map(|m| ("mean", m)));
            for (name, r) in rows {
                let _ = write!(out, "{name:<name_w$}");
                for v in r.values() {
                    let _ = write!(out, " {v:>9.4}");
                }
                out.push('\n');
            }
        }
        if !self.errors.is_empty() {
            out.push_str("errors:\n");
            for e in &self.errors {
                let _ = writeln!(out, "  {e}");
            }
        }
        out
    }

    /// One CSV row per image plus a final `mean` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let mut header = vec!["image"];
        header.extend(METRIC_NAMES);
        w.write_record(&header)?;
        let mean = self.mean();
        for (name, r) in self
            .rows
            .iter()
            .map(|(n, r)| (n.as_str(), r))
            .chain(mean.iter().map(|m| ("mean", m)))
        {
            let mut rec = vec![name.to_string()];
            rec.extend(r.values().iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

const IMAGE_EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "gif"];

/// Image files directly inside `dir`, keyed by file name.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if ok && path.is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Evaluates every fused image that has infrared and visible counterparts
/// with the same file name, in file-name order.
pub fn evaluate_directory(
    fused_dir: impl AsRef<Path>,
    ir_dir: impl AsRef<Path>,
    vis_dir: impl AsRef<Path>,
    reduction: SsimReduction,
) -> Result<MetricsTable> {
    let (ir_dir, vis_dir) = (ir_dir.as_ref(), vis_dir.as_ref());
    let mut table = MetricsTable::default();
    for (name, path) in list_images(fused_dir.as_ref())? {
        let ir = ir_dir.join(&name);
        let vis = vis_dir.join(&name);
        let missing: Vec<_> = [("ir", &ir), ("vis", &vis)]
            .into_iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(k, _)| k)
            .collect();
        if !missing.is_empty() {
            table.errors.push(format!(
                "{name}: missing {} counterpart",
                missing.join(" and ")
            ));
            continue;
        }
        let load = |p: &Path| load_image(p, ChannelLayout::Gray1);
        let report = (|| evaluate_pair(&load(&path)?, &load(&ir)?, &load(&vis)?, reduction))();
        match report {
            Ok(r) => table.rows.push((name, r)),
            Err(e) => table.errors.push(format!("{name}: {e}")),
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_png;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(seed: u64, h: usize, w: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_range(0..256) as f64)
    }

    fn box_blur(x: &Array2<f64>) -> Array2<f64> {
        let (h, w) = x.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    acc += x[[ii, jj]];
                }
            }
            acc / 9.0
        })
    }

    #[test]
    fn entropy_examples() {
        let c = Array2::from_elem((16, 16), 77.0);
        assert_eq!(entropy(c.view()), 0.0);
        let half = Array2::from_shape_fn((16, 16), |(i, _)| if i < 8 { 0.0 } else { 255.0 });
        assert!((entropy(half.view()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_entropy_uses_the_unit_range() {
        let dev = Device::Cpu;
        let half = Array2::from_shape_fn((16, 16), |(i, _)| if i < 8 { 0.0 } else { 1.0 });
        let img = ImageTensor::from_plane(&half, &dev).unwrap();
        assert!((image_entropy(&img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_fused_image_has_no_variation() {
        let c = Array2::from_elem((32, 32), 100.0);
        let src = random_plane(3, 32, 32);
        let r = evaluate_planes(&c, &src, &src, SsimReduction::Sum).unwrap();
        assert_eq!((r.en, r.sf, r.ag, r.sd), (0.0, 0.0, 0.0, 0.0));
        assert!(r.is_finite());
    }

    #[test]
    fn self_agreement() {
        let x = box_blur(&random_plane(1, 48, 48));
        let r = evaluate_planes(&x, &x, &x, SsimReduction::Sum).unwrap();
        assert!((r.ssim - 2.0).abs() < 1e-9);
        assert_eq!(r.scd, 0.0);
        // The sigmoid constants of the edge-transfer score saturate just
        // below one for a perfect match.
        let cap = (QABF_TG / (1.0 + (QABF_KG * (1.0 - QABF_DG)).exp()))
            * (QABF_TA / (1.0 + (QABF_KA * (1.0 - QABF_DA)).exp()));
        assert!((r.qabf - cap).abs() < 1e-12);
        assert!((r.qabf - 1.0).abs() < 0.03);
        let mean = evaluate_planes(&x, &x, &x, SsimReduction::Mean).unwrap();
        assert!((mean.ssim - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array2::zeros((16, 16));
        let b = Array2::zeros((16, 17));
        assert!(matches!(
            evaluate_planes(&a, &b, &a, SsimReduction::Sum),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn blur_lowers_sharpness_measures() {
        let x = random_plane(9, 32, 32);
        let b = box_blur(&x);
        assert!(spatial_frequency(b.view()) < spatial_frequency(x.view()));
        assert!(average_gradient(b.view()) < average_gradient(x.view()));
    }

    #[test]
    fn tiny_images_stay_finite() {
        let f = random_plane(1, 8, 8);
        let r = evaluate_planes(
            &f,
            &random_plane(2, 8, 8),
            &random_plane(3, 8, 8),
            SsimReduction::Sum,
        )
        .unwrap();
        assert!(r.is_finite());
    }

    fn write_gray(path: &Path, plane: &Array2<f64>) {
        save_png(
            &ImageTensor::from_plane(&(plane / 255.0), &Device::Cpu).unwrap(),
            path,
        )
        .unwrap();
    }

    #[test]
    fn directory_table() {
        let root = tempfile::tempdir().unwrap();
        let d = |n: &str| {
            let p = root.path().join(n);
            std::fs::create_dir_all(&p).unwrap();
            p
        };
        let (f, i, v) = (d("fused"), d("ir"), d("vis"));
        let empty = evaluate_directory(&f, &i, &v, SsimReduction::Sum).unwrap();
        assert!(empty.is_empty());
        assert!(empty.to_text().contains("no pairs"));

        let x = box_blur(&random_plane(4, 24, 24));
        for name in ["a.png", "b.png"] {
            for dir in [&f, &i, &v] {
                write_gray(&dir.join(name), &x);
            }
        }
        write_gray(&f.join("c.png"), &x);
        write_gray(&i.join("c.png"), &x);
        let t = evaluate_directory(&f, &i, &v, SsimReduction::Sum).unwrap();
        assert_eq!(
            t.rows.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
            ["a.png", "b.png"]
        );
        assert_eq!(t.errors.len(), 1);
        assert!(t.errors[0].contains("c.png") && t.errors[0].contains("vis"));
        let mean = t.mean().unwrap();
        for (a, b) in mean.values().iter().zip(t.rows[0].1.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let text = t.to_text();
        for m in METRIC_NAMES {
            assert!(text.contains(m));
        }
        let csv_path = root.path().join("m.csv");
        t.write_csv(&csv_path).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("image,EN,SD,SF,MI,VIF,Qabf,AG,SSIM,SCD"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn transposition_invariance(seed in 0u64..1000, h in 8usize..24, w in 8usize..24) {
            let x = random_plane(seed, h, w);
            let t = x.t().to_owned();
            prop_assert!((entropy(x.view()) - entropy(t.view())).abs() < 1e-12);
            prop_assert!((standard_deviation(x.view()) - standard_deviation(t.view())).abs() < 1e-9);
            prop_assert!((spatial_frequency(x.view()) - spatial_frequency(t.view())).abs() < 1e-9);
            prop_assert!((average_gradient(x.view()) - average_gradient(t.view())).abs() < 1e-9);
        }

        #[test]
        fn self_information_is_maximal(seed in 0u64..1000) {
            let x = random_plane(seed, 16, 16);
            let y = random_plane(seed + 1, 16, 16);
            prop_assert!(mutual_information(x.view(), x.view()) >= mutual_information(x.view(), y.view()));
        }

        #[test]
        fn metrics_are_deterministic_and_bounded(seed in 0u64..1000) {
            let f = random_plane(seed, 16, 16);
            let i = random_plane(seed + 1, 16, 16);
            let v = random_plane(seed + 2, 16, 16);
            let a = evaluate_planes(&f, &i, &v, SsimReduction::Mean).unwrap();
            let b = evaluate_planes(&f, &i, &v, SsimReduction::Mean).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=8.0).contains(&a.en));
            prop_assert!((-1.0..=1.0).contains(&a.ssim));
            prop_assert!(a.is_finite());
        }
    }
}
