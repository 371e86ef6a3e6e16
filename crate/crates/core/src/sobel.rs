//! Per-channel Sobel gradients.
//!
//! Borders are replicate-padded so a constant image has zero gradient
//! everywhere and adding a constant never changes the response.

use candle_core::Tensor;

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn correlate(
    padded: &Tensor,
    kernel: &[[f64; 3]; 3],
    h: usize,
    w: usize,
) -> candle_core::Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (dy, row) in kernel.iter().enumerate() {
        for (dx, &k) in row.iter().enumerate() {
            if k == 0.0 {
                continue;
            }
            let term = (padded.narrow(2, dy, h)?.narrow(3, dx, w)? * k)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("sobel kernels are non-zero"))
}

/// Horizontal and vertical Sobel responses of every channel.
pub fn sobel_xy(x: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    let p = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    Ok((correlate(&p, &KX, h, w)?, correlate(&p, &KY, h, w)?))
}

/// Gradient magnitude `|gx| + |gy|`, same shape as the input.
pub fn sobel_gradient(x: &Tensor) -> candle_core::Result<Tensor> {
    let (gx, gy) = sobel_xy(x)?;
    gx.abs()? + gy.abs()?
}
