//! Loss values against the independent reference in `oracles/reference.py`.

use smfnet::losses::{correlation_coefficient, grad_loss, semantic_gram_loss, ssim};
use smfnet::{DType, Device, Tensor};

fn pair() -> (Tensor, Tensor) {
    let n = 16;
    let x: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            ((0.3 * i).sin() + (0.2 * j).cos() + 2.0) / 4.0
        })
        .collect();
    let y: Vec<f64> = x.iter().map(|v| v * v).collect();
    let dev = Device::Cpu;
    (
        Tensor::from_vec(x, (1, 1, n, n), &dev).unwrap(),
        Tensor::from_vec(y, (1, 1, n, n), &dev).unwrap(),
    )
}

fn value(t: Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn ssim_matches_reference() {
    let (x, y) = pair();
    let got = value(ssim(&x, &y).unwrap());
    assert!((got - 0.875785690558394).abs() < 1e-9, "{got}");
}

#[test]
fn grad_loss_matches_reference() {
    let (x, y) = pair();
    let got = value(grad_loss(&x, &y).unwrap());
    assert!((got - 0.22761891921046867).abs() < 1e-9, "{got}");
}

#[test]
fn gram_loss_matches_reference() {
    let (x, y) = pair();
    let got = value(semantic_gram_loss(&x, &y).unwrap());
    assert!((got - 0.00010561134288661574).abs() < 1e-12, "{got}");
}

#[test]
fn correlation_matches_reference() {
    let (x, y) = pair();
    let got = value(correlation_coefficient(&x, &y).unwrap());
    assert!((got - 0.9693945267089885).abs() < 1e-9, "{got}");
}

#[test]
fn single_precision_stays_close() {
    let (x, y) = pair();
    let (x, y) = (
        x.to_dtype(DType::F32).unwrap(),
        y.to_dtype(DType::F32).unwrap(),
    );
    let got = value(ssim(&x, &y).unwrap());
    assert!((got - 0.875785690558394).abs() < 1e-5, "{got}");
}
