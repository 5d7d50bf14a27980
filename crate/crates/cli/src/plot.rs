//! Optional SVG figures. Presentation only; nothing reads them back.

use std::path::Path;

use plotters::prelude::*;
use simts::eval::ResultRow;

use crate::error::CliError;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("cannot draw {}: {e}", path.display()))
}

pub fn loss_curve(path: &Path, history: &[f64]) -> Result<(), CliError> {
    if history.is_empty() {
        return Ok(());
    }
    let (lo, hi) = history
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = ((hi - lo) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(1usize..history.len().max(2), (lo - pad)..(hi + pad))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("mean loss")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(
            history.iter().enumerate().map(|(i, &v)| (i + 1, v)),
            &BLUE,
        ))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// One bar per result row, labelled `variant/h`.
pub fn mse_bars(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    if rows.is_empty() {
        return Ok(());
    }
    let top = rows.iter().map(|r| r.mse).fold(0.0, f64::max) * 1.1 + 1e-9;
    let labels: Vec<String> = rows
        .iter()
        .map(|r| format!("{}/h{}/s{}", r.variant, r.horizon, r.seed))
        .collect();
    let root = SVGBackend::new(path, (120 + 60 * rows.len() as u32, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("test MSE", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(90)
        .y_label_area_size(50)
        .build_cartesian_2d((0..rows.len()).into_segmented(), 0.0..top)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(rows.len())
        .x_label_formatter(&|x| match x {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .x_label_style(("sans-serif", 11).into_font().transform(FontTransform::Rotate90))
        .y_desc("mse")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.filled())
                .margin(6)
                .data(rows.iter().enumerate().map(|(i, r)| (i, r.mse))),
        )
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
