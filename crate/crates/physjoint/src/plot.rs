//! Static charts. Each chart is written twice: a labelled SVG and a PNG of
//! the same geometry without text (no font rasteriser is linked).

use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};

use crate::error::{Error, Result};
use crate::io::write_atomic;

const SIZE: (u32, u32) = (720, 420);

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub title: &'a str,
    pub x: &'a str,
    pub y: &'a str,
}

/// One bar group, with a value per category; `None` marks a failed row.
#[derive(Clone, Debug, PartialEq)]
pub struct BarGroup {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi - lo < 1e-12 {
        lo.abs().max(1.0) * 0.05
    } else {
        (hi - lo) * 0.05
    };
    (lo - pad, hi + pad)
}

type DrawResult<DB> =
    std::result::Result<(), DrawingAreaErrorKind<<DB as DrawingBackend>::ErrorType>>;

fn draw_lines<DB: DrawingBackend>(
    root: &DrawingArea<DB, Shift>,
    labels: Labels,
    series: &[Series],
    text: bool,
) -> DrawResult<DB> {
    root.fill(&WHITE)?;
    let xs = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut builder = ChartBuilder::on(root);
    builder.margin(12);
    if text {
        builder
            .caption(labels.title, ("sans-serif", 20))
            .x_label_area_size(40)
            .y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(labels.x).y_desc(labels.y);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts = s
            .points
            .iter()
            .copied()
            .filter(|p| p.0.is_finite() && p.1.is_finite());
        let drawn = chart.draw_series(LineSeries::new(pts, color.stroke_width(2)))?;
        if text {
            drawn.label(s.name.as_str()).legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2))
            });
        }
    }
    if text && series.len() > 1 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()
}

fn draw_bars<DB: DrawingBackend>(
    root: &DrawingArea<DB, Shift>,
    labels: Labels,
    categories: &[String],
    groups: &[BarGroup],
    text: bool,
) -> DrawResult<DB> {
    root.fill(&WHITE)?;
    let n = categories.len().max(1);
    let (lo, hi) = span(
        groups
            .iter()
            .flat_map(|g| g.values.iter().flatten().copied())
            .chain([0.0]),
    );
    let mut builder = ChartBuilder::on(root);
    builder.margin(12);
    if text {
        builder
            .caption(labels.title, ("sans-serif", 20))
            .x_label_area_size(40)
            .y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(-0.5..n as f64 - 0.5, lo.min(0.0)..hi)?;
    let mut mesh = chart.configure_mesh();
    mesh.x_labels(0).disable_x_mesh();
    if text {
        mesh.y_desc(labels.y);
    } else {
        mesh.y_labels(0);
    }
    mesh.draw()?;
    let width = 0.8 / groups.len().max(1) as f64;
    for (j, g) in groups.iter().enumerate() {
        let color = Palette99::pick(j).to_rgba();
        let bars = g.values.iter().enumerate().filter_map(|(i, v)| {
            let x0 = i as f64 - 0.4 + j as f64 * width;
            v.filter(|v| v.is_finite())
                .map(|v| Rectangle::new([(x0, 0.0), (x0 + width, v)], color.filled()))
        });
        let drawn = chart.draw_series(bars)?;
        if text && groups.len() > 1 {
            drawn.label(g.name.as_str()).legend(move |(x, y)| {
                Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled())
            });
        }
    }
    if text {
        let below =
            TextStyle::from(("sans-serif", 13).into_font()).pos(Pos::new(HPos::Center, VPos::Top));
        for (i, c) in categories.iter().enumerate() {
            let (px, py) = chart.backend_coord(&(i as f64, lo.min(0.0)));
            root.draw(&Text::new(c.clone(), (px, py + 6), below.clone()))?;
        }
        let note = TextStyle::from(("sans-serif", 12).into_font())
            .pos(Pos::new(HPos::Center, VPos::Bottom));
        for (j, g) in groups.iter().enumerate() {
            for (i, v) in g.values.iter().enumerate() {
                if v.is_none_or(|v| !v.is_finite()) {
                    let x = i as f64 - 0.4 + (j as f64 + 0.5) * width;
                    let (px, py) = chart.backend_coord(&(x, 0.0));
                    root.draw(&Text::new("failed", (px, py - 2), note.clone()))?;
                }
            }
        }
        if groups.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()?;
        }
    }
    root.present()
}

fn render<F, G>(stem: &Path, svg: F, png: G) -> Result<()>
where
    F: for<'a> FnOnce(&DrawingArea<SVGBackend<'a>, Shift>) -> std::result::Result<(), String>,
    G: for<'a> FnOnce(&DrawingArea<BitMapBackend<'a>, Shift>) -> std::result::Result<(), String>,
{
    let svg_path = stem.with_extension("svg");
    let png_path = stem.with_extension("png");
    let mut s = String::new();
    {
        let root = SVGBackend::with_string(&mut s, SIZE).into_drawing_area();
        svg(&root).map_err(|e| Error::format(&svg_path, e))?;
    }
    write_atomic(&svg_path, s.as_bytes())?;
    let mut buf = vec![0u8; (SIZE.0 * SIZE.1 * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, SIZE).into_drawing_area();
        png(&root).map_err(|e| Error::format(&png_path, e))?;
    }
    let img = image::RgbImage::from_raw(SIZE.0, SIZE.1, buf).expect("buffer matches size");
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::format(&png_path, e))?;
    write_atomic(&png_path, &bytes)
}

/// Writes `<stem>.svg` and `<stem>.png`.
pub fn line_chart(stem: &Path, labels: Labels, series: &[Series]) -> Result<()> {
    render(
        stem,
        |r| draw_lines(r, labels, series, true).map_err(|e| e.to_string()),
        |r| draw_lines(r, labels, series, false).map_err(|e| e.to_string()),
    )
}

/// Grouped bars, one cluster per category. Writes `<stem>.svg` and `<stem>.png`.
pub fn bar_chart(
    stem: &Path,
    labels: Labels,
    categories: &[String],
    groups: &[BarGroup],
) -> Result<()> {
    render(
        stem,
        |r| draw_bars(r, labels, categories, groups, true).map_err(|e| e.to_string()),
        |r| draw_bars(r, labels, categories, groups, false).map_err(|e| e.to_string()),
    )
}
