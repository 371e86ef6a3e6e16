//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use smfnet::params::{randn, Params};
use smfnet::{DType, Device, Tensor};

/// 64x64 infrared checkerboard, visible ramp, fused = pixelwise max.
pub fn synthetic_triple(n: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let ir = Array2::from_shape_fn((n, n), |(i, j)| {
        if (i / 8 + j / 8) % 2 == 0 {
            40.0f64
        } else {
            200.0
        }
    });
    let vis = Array2::from_shape_fn((n, n), |(i, j)| (2 * i + 2 * j) as f64);
    let fused = Array2::from_shape_fn((n, n), |p| ir[p].max(vis[p]));
    (ir, vis, fused)
}

/// Frozen output of `oracles/reference.py` for [`synthetic_triple`]`(64)`.
pub const METRIC_REFERENCE: [(&str, f64); 9] = [
    ("EN", 4.34855234684569),
    ("SD", 52.4034870399764),
    ("SF", 41.40779103900809),
    ("MI", 3.2165283632198665),
    ("VIF", 0.4429797746074875),
    ("Qabf", 0.4286267647496634),
    ("AG", 12.316622104434751),
    ("SSIM", 0.8394313156264677),
    ("SCD", 1.2246817066953806),
];

/// Replaces every parameter with `scale * N(0, 1)` so zero-initialised
/// layers take part too. Attention temperatures become
/// `0.5 + scale * |N(0, 1)|` instead.
pub fn randomize(params: &Params, scale: f64, seed: u64) {
    for (i, name) in params.names().iter().enumerate() {
        let var = params.var(name).unwrap();
        let mut value = (randn(
            var.shape().clone(),
            seed * 10_000 + i as u64,
            DType::F64,
            params.device(),
        )
        .unwrap()
            * scale)
            .unwrap();
        if name.contains("temperature") {
            // Attention temperatures divide the logits, so keep them away from zero.
            value = (value.abs().unwrap() + 0.5).unwrap();
        }
        params.set(name, &value).unwrap();
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn cpu() -> Device {
    Device::Cpu
}
