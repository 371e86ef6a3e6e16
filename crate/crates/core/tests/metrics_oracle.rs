//! Metric values against the independent reference in `oracles/reference.py`.

mod common;

use common::{synthetic_triple, METRIC_REFERENCE as REFERENCE};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smfnet::imaging::ImageTensor;
use smfnet::metrics::{self, evaluate_pair, evaluate_planes, SsimReduction};
use smfnet::Device;

const TOL: f64 = 1e-4;

#[test]
fn synthetic_triple_matches_reference() {
    let (ir, vis, fused) = synthetic_triple(64);
    let r = evaluate_planes(&fused, &ir, &vis, SsimReduction::Sum).unwrap();
    for ((name, want), got) in REFERENCE.iter().zip(r.values()) {
        assert!(
            (got - want).abs() < TOL,
            "{name}: got {got}, reference {want}"
        );
    }
}

#[test]
fn image_tensor_path_matches_reference() {
    let dev = Device::Cpu;
    let (ir, vis, fused) = synthetic_triple(64);
    let img = |a: &Array2<f64>| ImageTensor::from_plane(&(a / 255.0), &dev).unwrap();
    let r = evaluate_pair(&img(&fused), &img(&ir), &img(&vis), SsimReduction::Sum).unwrap();
    for ((name, want), got) in REFERENCE.iter().zip(r.values()) {
        assert!(
            (got - want).abs() < TOL,
            "{name}: got {got}, reference {want}"
        );
    }
}

#[test]
fn mean_reduction_halves_ssim() {
    let (ir, vis, fused) = synthetic_triple(64);
    let sum = evaluate_planes(&fused, &ir, &vis, SsimReduction::Sum).unwrap();
    let mean = evaluate_planes(&fused, &ir, &vis, SsimReduction::Mean).unwrap();
    assert!((sum.ssim - 2.0 * mean.ssim).abs() < 1e-12);
}

#[test]
fn entropy_of_uniform_random_bytes_is_near_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_fn((512, 512), |_| rng.random_range(0..256) as f64);
    let en = metrics::entropy(x.view());
    assert!((7.95..=8.0).contains(&en), "{en}");
}
