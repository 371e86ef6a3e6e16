//! Loss-curve images.
//!
//! The bitmap backend is built without font support, so plots carry no text:
//! one coloured line per loss term (in CSV column order) plus the weighted
//! total in black, each normalised to its own maximum.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::train::EpochRecord;

pub fn plot_loss_curves(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let fail = |e: String| Error::io(path, std::io::Error::other(e));
    let Some(first) = records.first() else {
        return Ok(());
    };
    let mut series: Vec<Vec<f64>> = (0..first.report.terms.len())
        .map(|i| records.iter().map(|r| r.report.terms[i].value).collect())
        .collect();
    series.push(records.iter().map(|r| r.report.total()).collect());
    let n = records.len().max(2) as f64 - 1.0;

    let (w, h) = (800u32, 480u32);
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| fail(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .build_cartesian_2d(0f64..n.max(1.0), 0f64..1.05)
            .map_err(|e| fail(e.to_string()))?;
        chart
            .plotting_area()
            .draw(&Rectangle::new(
                [(0.0, 0.0), (n.max(1.0), 1.05)],
                BLACK.stroke_width(1),
            ))
            .map_err(|e| fail(e.to_string()))?;
        let last = series.len() - 1;
        for (i, s) in series.iter().enumerate() {
            let peak = s.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
            let style = if i == last {
                BLACK.stroke_width(3)
            } else {
                Palette99::pick(i).stroke_width(2)
            };
            chart
                .draw_series(LineSeries::new(
                    s.iter().enumerate().map(|(x, y)| (x as f64, y * scale)),
                    style,
                ))
                .map_err(|e| fail(e.to_string()))?;
        }
        root.present().map_err(|e| fail(e.to_string()))?;
    }
    let img = image::RgbImage::from_raw(w, h, buf).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}
