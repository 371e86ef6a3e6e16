//! Inference from a checkpoint.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use candle_nn::VarBuilder;

use crate::error::{invalid, Error, Result};
use crate::imaging::{
    crop_to, load_image, pad_to_multiple, rgb_to_ycbcr, save_png, with_luminance, ycbcr_to_rgb,
    ChannelLayout, ImageTensor, NETWORK_MULTIPLE,
};
use crate::metrics::list_images;
use crate::model::SmfNet;
use crate::train::checkpoint::Checkpoint;

/// Rebuilds the network from checkpoint weights. The weights are plain
/// tensors, so forwards record no gradient graph.
pub fn load_network(ckpt: &Checkpoint, device: &Device) -> Result<SmfNet> {
    let mut map = HashMap::with_capacity(ckpt.tensors.len());
    for (k, v) in &ckpt.tensors {
        map.insert(
            k.clone(),
            v.to_device(device)?.to_dtype(DType::F32)?.detach(),
        );
    }
    let vb = VarBuilder::from_tensors(map, DType::F32, device);
    let cfg = &ckpt.manifest.config;
    SmfNet::new(
        vb,
        &cfg.model,
        &cfg.ablation,
        ckpt.manifest.stage.has_fusion_layers(),
    )
    .map_err(|e| Error::Checkpoint(format!("weights do not match the manifest: {e}")))
}

#[derive(Debug, Clone)]
pub struct Fuser {
    net: SmfNet,
}

impl Fuser {
    pub fn from_checkpoint(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        if !ckpt.has_fusion_layers() {
            return Err(invalid!(
                "fusion layers missing: {:?} checkpoint cannot fuse, train stage II first",
                ckpt.manifest.stage
            ));
        }
        Ok(Self {
            net: load_network(ckpt, device)?,
        })
    }

    pub fn network(&self) -> &SmfNet {
        &self.net
    }

    fn multiple(&self) -> usize {
        let m = self.net.required_multiple();
        NETWORK_MULTIPLE / gcd(NETWORK_MULTIPLE, m) * m
    }

    /// Fuses two grayscale images of any size; the result has the input
    /// dimensions.
    pub fn fuse_luminance(&self, ir: &ImageTensor, vis_y: &ImageTensor) -> Result<ImageTensor> {
        let (ir, vis_y) = (ir.to_gray()?, vis_y.to_gray()?);
        if ir.dims() != vis_y.dims() {
            return Err(Error::ShapeMismatch {
                expected: vis_y.tensor().dims().to_vec(),
                actual: ir.tensor().dims().to_vec(),
            });
        }
        let m = self.multiple();
        let (ir_p, dims) = pad_to_multiple(&ir, m)?;
        let (vis_p, _) = pad_to_multiple(&vis_y, m)?;
        let fused = self.net.fuse(vis_p.tensor(), ir_p.tensor())?.fused;
        let fused = ImageTensor::new(fused.clamp(0f32, 1f32)?, ChannelLayout::Gray1)?;
        crop_to(&fused, dims)
    }

    /// Fuses the luminance and restores colour from the visible image.
    pub fn fuse_pair(&self, ir: &ImageTensor, vis: &ImageTensor) -> Result<ImageTensor> {
        let rgb = match vis.layout() {
            ChannelLayout::Rgb3 => vis.clone(),
            ChannelLayout::YCbCr3 => ycbcr_to_rgb(vis)?,
            ChannelLayout::Gray1 => {
                ImageTensor::new(vis.tensor().repeat((1, 3, 1, 1))?, ChannelLayout::Rgb3)?
            }
        };
        let ycbcr = rgb_to_ycbcr(&rgb)?;
        let y = ycbcr.to_gray()?;
        let fused_y = self.fuse_luminance(ir, &y)?;
        ycbcr_to_rgb(&with_luminance(&ycbcr, &fused_y)?)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Fuses every `ir/name` with `vis/name` and writes `out/<stem>.png`.
pub fn fuse_directory(
    fuser: &Fuser,
    ir_dir: &Path,
    vis_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vis_files = list_images(vis_dir)?;
    let mut written = Vec::new();
    for (name, ir_path) in list_images(ir_dir)? {
        let Some(vis_path) = vis_files.get(&name) else {
            log::warn!("{name}: no visible counterpart, skipped");
            continue;
        };
        let ir = load_image(&ir_path, ChannelLayout::Gray1)?;
        let vis = load_image(vis_path, ChannelLayout::Rgb3)?;
        let fused = fuser.fuse_pair(&ir, &vis)?;
        let stem = Path::new(&name)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(name);
        let path = out_dir.join(format!("{stem}.png"));
        save_png(&fused, &path)?;
        written.push(path);
    }
    Ok(written)
}
