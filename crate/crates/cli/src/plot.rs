use std::path::Path;

use plotters::prelude::*;

use crate::bundle::Figure;

const PALETTE: [RGBColor; 6] =
    [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189), RGBColor(255, 127, 14), RGBColor(23, 190, 207)];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Renders `fig` as SVG. Log axes are drawn as `log10` of the data.
pub fn render(fig: &Figure, path: &Path) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let tx = |v: f64| if fig.log_x { v.log10() } else { v };
    let ty = |v: f64| if fig.log_y { v.log10() } else { v };
    let keep = |p: &(f64, f64)| (!fig.log_x || p.0 > 0.0) && (!fig.log_y || p.1 > 0.0);
    let series: Vec<Vec<(f64, f64)>> = fig.series.iter().map(|s| s.points.iter().filter(|p| keep(p)).map(|&(x, y)| (tx(x), ty(y))).collect()).collect();
    let (x0, x1) = bounds(series.iter().flatten().map(|p| p.0));
    let (y0, y1) = bounds(series.iter().flatten().map(|p| p.1));

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&fig.title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| e.to_string())?;
    let xl = if fig.log_x { format!("log10 {}", fig.x_label) } else { fig.x_label.clone() };
    let yl = if fig.log_y { format!("log10 {}", fig.y_label) } else { fig.y_label.clone() };
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(|e| e.to_string())?;
    for (k, (s, pts)) in fig.series.iter().zip(&series).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.markers {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(|e| e.to_string())?
                .label(s.label.clone())
                .legend(move |(x, y)| Circle::new((x + 10, y), 3, color.filled()));
        } else {
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(|e| e.to_string())?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if fig.series.len() > 1 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| e.to_string())?;
    }
    root.present().map_err(|e| e.to_string())?;
    Ok(())
}
