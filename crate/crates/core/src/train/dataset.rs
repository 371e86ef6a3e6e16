//! Paired infrared/visible patch sets.

use std::path::Path;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::imaging::{crop_patches, load_image, ChannelLayout, ImageTensor, PatchSpec};
use crate::metrics::list_images;

/// Aligned grayscale patches, `N x 1 x P x P` per modality.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    ir: Tensor,
    vis: Tensor,
}

impl PairedDataset {
    /// Crops every pair into patches. Visible images are reduced to
    /// grayscale.
    pub fn from_pairs(pairs: &[(ImageTensor, ImageTensor)], patch: PatchSpec) -> Result<Self> {
        let mut ir = Vec::new();
        let mut vis = Vec::new();
        for (i, v) in pairs {
            let (i, v) = (i.to_gray()?, v.to_gray()?);
            if i.dims() != v.dims() {
                return Err(Error::ShapeMismatch {
                    expected: i.tensor().dims().to_vec(),
                    actual: v.tensor().dims().to_vec(),
                });
            }
            ir.extend(
                crop_patches(&i, patch)?
                    .into_iter()
                    .map(|p| p.into_tensor()),
            );
            vis.extend(
                crop_patches(&v, patch)?
                    .into_iter()
                    .map(|p| p.into_tensor()),
            );
        }
        if ir.is_empty() {
            return Err(invalid!("dataset is empty"));
        }
        Ok(Self {
            ir: Tensor::cat(&ir, 0)?,
            vis: Tensor::cat(&vis, 0)?,
        })
    }

    /// Loads `root/ir/*` and `root/vis/*` with matching file names. Files
    /// without a counterpart are skipped with a warning.
    pub fn from_dir(root: impl AsRef<Path>, patch: PatchSpec) -> Result<Self> {
        let root = root.as_ref();
        let (ir_dir, vis_dir) = (root.join("ir"), root.join("vis"));
        for d in [&ir_dir, &vis_dir] {
            if !d.is_dir() {
                return Err(invalid!("dataset directory {} not found", d.display()));
            }
        }
        let ir_files = list_images(&ir_dir)?;
        let vis_files = list_images(&vis_dir)?;
        let mut pairs = Vec::new();
        for (name, ir_path) in &ir_files {
            match vis_files.get(name) {
                Some(vis_path) => pairs.push((
                    load_image(ir_path, ChannelLayout::Gray1)?,
                    load_image(vis_path, ChannelLayout::Gray1)?,
                )),
                None => log::warn!("{name}: no visible counterpart, skipped"),
            }
        }
        for name in vis_files.keys().filter(|n| !ir_files.contains_key(*n)) {
            log::warn!("{name}: no infrared counterpart, skipped");
        }
        if pairs.is_empty() {
            return Err(invalid!(
                "no matching ir/vis pairs under {}",
                root.display()
            ));
        }
        Self::from_pairs(&pairs, patch)
    }

    /// Deterministic smooth toy scenes: warm blobs on a dim background for
    /// infrared, shaded gradients and a soft rectangle for visible.
    pub fn synthetic(count: usize, size: usize, seed: u64, device: &Device) -> Result<Self> {
        let pairs = synthetic_pairs(count, size, seed, device)?;
        Self::from_pairs(&pairs, PatchSpec::new(size, size)?)
    }

    pub fn len(&self) -> usize {
        self.ir.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_size(&self) -> usize {
        self.ir.dim(2).unwrap_or(0)
    }

    pub fn ir(&self) -> &Tensor {
        &self.ir
    }

    pub fn vis(&self) -> &Tensor {
        &self.vis
    }

    /// Full batches `(vis, ir)` in a shuffled order; the last partial batch is
    /// dropped.
    pub fn epoch_batches(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        if batch == 0 || batch > self.len() {
            return Err(invalid!(
                "batch size {batch} does not fit a dataset of {} patches",
                self.len()
            ));
        }
        let mut order: Vec<u32> = (0..self.len() as u32).collect();
        order.shuffle(rng);
        order
            .chunks_exact(batch)
            .map(|idx| {
                let idx = Tensor::new(idx, self.ir.device())?;
                Ok((
                    self.vis.index_select(&idx, 0)?,
                    self.ir.index_select(&idx, 0)?,
                ))
            })
            .collect()
    }
}

/// The image pairs behind [`PairedDataset::synthetic`], as `(ir, vis)`.
pub fn synthetic_pairs(
    count: usize,
    size: usize,
    seed: u64,
    device: &Device,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ir = Array2::from_elem((size, size), 0.15 + 0.1 * rng.random::<f64>());
        for _ in 0..rng.random_range(1..=3) {
            let (cy, cx) = (rng.random::<f64>() * s, rng.random::<f64>() * s);
            let sigma = s * (0.08 + 0.1 * rng.random::<f64>());
            let amp = 0.4 + 0.3 * rng.random::<f64>();
            for ((y, x), v) in ir.indexed_iter_mut() {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                *v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let (gy, gx) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        let freq = 1.0 + 2.0 * rng.random::<f64>();
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let (r0, r1) = (
            rng.random::<f64>() * 0.4 * s,
            (0.6 + rng.random::<f64>() * 0.4) * s,
        );
        let (c0, c1) = (
            rng.random::<f64>() * 0.4 * s,
            (0.6 + rng.random::<f64>() * 0.4) * s,
        );
        let soft = |t: f64| 1.0 / (1.0 + (-t / 1.5).exp());
        let vis = Array2::from_shape_fn((size, size), |(y, x)| {
            let (yf, xf) = (y as f64, x as f64);
            let ramp = 0.45 + 0.3 * (gy * yf + gx * xf) / s;
            let wave = 0.08 * (freq * std::f64::consts::TAU * xf / s + phase).sin();
            let rect = 0.2 * soft(yf - r0) * soft(r1 - yf) * soft(xf - c0) * soft(c1 - xf);
            ramp + wave + rect
        });
        let clip = |a: Array2<f64>| a.mapv(|v| v.clamp(0.0, 1.0));
        out.push((
            ImageTensor::from_plane(&clip(ir), device)?,
            ImageTensor::from_plane(&clip(vis), device)?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_set_is_deterministic_and_in_range() {
        let dev = Device::Cpu;
        let a = PairedDataset::synthetic(4, 16, 3, &dev).unwrap();
        let b = PairedDataset::synthetic(4, 16, 3, &dev).unwrap();
        assert_eq!(a.len(), 4);
        let diff = (a.ir() - b.ir()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        let lo = a.vis().min_all().unwrap().to_scalar::<f32>().unwrap();
        let hi = a.vis().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn batches_drop_the_partial_tail() {
        let dev = Device::Cpu;
        let d = PairedDataset::synthetic(7, 16, 0, &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = d.epoch_batches(3, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].0.dims(), &[3, 1, 16, 16]);
        assert!(d.epoch_batches(8, &mut rng).is_err());
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        assert!(PairedDataset::from_pairs(&[], PatchSpec::new(8, 8).unwrap()).is_err());
    }

    #[test]
    fn directory_pairs_match_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synthetic_pairs(2, 16, 1, &Device::Cpu).unwrap();
        for d in ["ir", "vis"] {
            std::fs::create_dir(dir.path().join(d)).unwrap();
        }
        for (k, (i, v)) in pairs.iter().enumerate() {
            crate::imaging::save_png(i, dir.path().join("ir").join(format!("{k}.png"))).unwrap();
            crate::imaging::save_png(v, dir.path().join("vis").join(format!("{k}.png"))).unwrap();
        }
        crate::imaging::save_png(&pairs[0].0, dir.path().join("ir").join("lonely.png")).unwrap();
        let d = PairedDataset::from_dir(dir.path(), PatchSpec::new(8, 8).unwrap()).unwrap();
        assert_eq!(d.len(), 2 * 4);
    }
}
