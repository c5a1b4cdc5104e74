//! Chart rendering. Every plot is a derived artifact: the numbers behind
//! it are always also written as CSV by the caller.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::register_font;

use crate::error::{Error, Result};

/// One curve: mean values with a ± one-standard-deviation band.
#[derive(Debug, Clone)]
pub struct BandSeries {
    pub label: String,
    pub xs: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Registers a system font with the bitmap text rasterizer once. Charts
/// fall back to label-free rendering when no font can be found, so
/// plotting never fails on a headless box.
pub fn fonts_available() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        const CANDIDATES: &[&str] = &[
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
            "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
            "/usr/share/fonts/TTF/DejaVuSans.ttf",
        ];
        for path in CANDIDATES {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                    return true;
                }
            }
        }
        false
    })
}

const PALETTE: &[RGBColor] = &[
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
];

fn chart_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("chart rendering failed: {e}"))
}

/// Draws mean lines with shaded ± std bands for each series.
pub fn line_plot_with_band(
    path: impl AsRef<Path>,
    caption: &str,
    x_label: &str,
    y_label: &str,
    series: &[BandSeries],
) -> Result<()> {
    if series.is_empty() || series.iter().all(|s| s.xs.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    let xs_min = series.iter().flat_map(|s| &s.xs).cloned().fold(f64::INFINITY, f64::min);
    let xs_max = series.iter().flat_map(|s| &s.xs).cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_min = series
        .iter()
        .flat_map(|s| s.mean.iter().zip(&s.std).map(|(m, d)| m - d))
        .fold(f64::INFINITY, f64::min);
    let y_max = series
        .iter()
        .flat_map(|s| s.mean.iter().zip(&s.std).map(|(m, d)| m + d))
        .fold(f64::NEG_INFINITY, f64::max);
    let pad_x = ((xs_max - xs_min) * 0.05).max(1e-9);
    let pad_y = ((y_max - y_min) * 0.08).max(1e-9);

    let with_text = fonts_available();
    let root = BitMapBackend::new(path.as_ref(), (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;

    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(12)
        .x_label_area_size(if with_text { 44 } else { 10 })
        .y_label_area_size(if with_text { 54 } else { 10 });
    if with_text {
        builder.caption(caption, ("sans-serif", 22));
    }
    let mut chart = builder
        .build_cartesian_2d(xs_min - pad_x..xs_max + pad_x, y_min - pad_y..y_max + pad_y)
        .map_err(chart_err)?;

    if with_text {
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .draw()
            .map_err(chart_err)?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()
            .map_err(chart_err)?;
    }

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = s.xs.iter().zip(s.mean.iter().zip(&s.std)).map(|(&x, (m, d))| (x, m + d));
        let lower = s
            .xs
            .iter()
            .zip(s.mean.iter().zip(&s.std))
            .map(|(&x, (m, d))| (x, m - d))
            .rev();
        let band: Vec<(f64, f64)> = upper.chain(lower).collect();
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.18))))
            .map_err(chart_err)?;
        let line = chart
            .draw_series(LineSeries::new(
                s.xs.iter().cloned().zip(s.mean.iter().cloned()),
                color.stroke_width(2),
            ))
            .map_err(chart_err)?;
        line.label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(
                s.xs.iter()
                    .zip(&s.mean)
                    .map(|(&x, &m)| Circle::new((x, m), 3, color.filled())),
            )
            .map_err(chart_err)?;
    }
    if with_text {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(chart_err)?;
    }
    root.present().map_err(chart_err)?;
    Ok(())
}

/// Draws one or more loss curves on a log-y axis.
pub fn loss_curve_plot(
    path: impl AsRef<Path>,
    caption: &str,
    curves: &[(&str, &[f64])],
) -> Result<()> {
    if curves.iter().all(|(_, c)| c.is_empty()) {
        return Err(Error::Config("nothing to plot".into()));
    }
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let y_min = curves
        .iter()
        .flat_map(|(_, c)| c.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let y_max = curves
        .iter()
        .flat_map(|(_, c)| c.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let with_text = fonts_available();
    let root = BitMapBackend::new(path.as_ref(), (900, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(chart_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .margin(12)
        .x_label_area_size(if with_text { 44 } else { 10 })
        .y_label_area_size(if with_text { 64 } else { 10 });
    if with_text {
        builder.caption(caption, ("sans-serif", 22));
    }
    let span = (y_max - y_min).max(1e-12);
    let mut chart = builder
        .build_cartesian_2d(
            0.0..n as f64,
            y_min - 0.05 * span..y_max + 0.05 * span,
        )
        .map_err(chart_err)?;
    if with_text {
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("loss")
            .draw()
            .map_err(chart_err)?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()
            .map_err(chart_err)?;
    }
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let drawn = chart
            .draw_series(LineSeries::new(
                curve.iter().enumerate().map(|(e, &v)| (e as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(chart_err)?;
        drawn.label(*label).legend(move |(x, y)| {
            PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
        });
    }
    if with_text {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(chart_err)?;
    }
    root.present().map_err(chart_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_plot_writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.png");
        let s = BandSeries {
            label: "demo".into(),
            xs: vec![5.0, 15.0, 25.0],
            mean: vec![18.0, 22.0, 24.0],
            std: vec![1.0, 0.8, 0.5],
        };
        line_plot_with_band(&path, "demo", "spokes", "PSNR (dB)", &[s]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }

    #[test]
    fn loss_plot_writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.png");
        loss_curve_plot(&path, "loss", &[("stage 1", &[3.0, 2.0, 1.5, 1.2])]).unwrap();
        assert!(path.exists());
    }
}
