//! Static PNG figures: per-term loss curves and t-SNE scatters.
//!
//! Text needs a TrueType font. `CARTOONFORGE_FONT` overrides the search;
//! without any font the figures are drawn without labels.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{Error, Result};
use crate::eval::tsne::{LabeledPoint, Source};
use crate::losses::LossReport;

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var_os("CARTOONFORGE_FONT").map(PathBuf::from);
        let bytes = env
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
            .find_map(|p| std::fs::read(p).ok());
        match bytes {
            Some(b) => {
                let b: &'static [u8] = Box::leak(b.into_boxed_slice());
                plotters::style::register_font("sans-serif", FontStyle::Normal, b).is_ok()
            }
            None => false,
        }
    })
}

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

/// Named series extracted from loss rows. Adversarial series appear only
/// when some row carries them.
pub fn loss_series(rows: &[LossReport]) -> Vec<(&'static str, Vec<(f64, f64)>)> {
    let pick = |f: &dyn Fn(&LossReport) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|v| (r.iteration as f64, v))).collect()
    };
    let mut out = vec![
        ("l_id", pick(&|r| Some(r.l_id))),
        ("l_lnd", pick(&|r| Some(r.l_lnd))),
        ("l_rec", pick(&|r| Some(r.l_rec))),
        ("l_adv_g", pick(&|r| r.l_adv_g)),
        ("l_adv_d", pick(&|r| r.l_adv_d)),
        ("l_total", pick(&|r| Some(r.l_total))),
    ];
    out.retain(|(_, s)| !s.is_empty());
    out
}

fn bounds(points: &[(f64, f64)]) -> ((f64, f64), (f64, f64)) {
    let fold = |f: fn(&(f64, f64)) -> f64| {
        points.iter().map(f).filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
    };
    let pad = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let span = (hi - lo).max(1e-9);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    (pad(fold(|p| p.0)), pad(fold(|p| p.1)))
}

fn single_chart(path: &Path, title: &str, series: &[(f64, f64)], color: RGBColor, text: bool) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(path))?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(12);
    if text {
        builder.caption(title, ("sans-serif", 20)).x_label_area_size(32).y_label_area_size(56);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(draw_err(path))?;
    if text {
        chart.configure_mesh().x_desc("iteration").draw().map_err(draw_err(path))?;
    }
    chart.draw_series(LineSeries::new(series.iter().copied(), &color)).map_err(draw_err(path))?;
    root.present().map_err(draw_err(path))?;
    Ok(())
}

/// Writes one `<term>.png` per loss term into `dir` and returns the paths.
pub fn plot_losses(rows: &[LossReport], dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Length("no loss rows to plot".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = font_available();
    let palette = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];
    let mut written = Vec::new();
    for (i, (name, series)) in loss_series(rows).into_iter().enumerate() {
        let path = dir.join(format!("{name}.png"));
        single_chart(&path, name, &series, palette[i % palette.len()], text)?;
        written.push(path);
    }
    Ok(written)
}

/// Scatter of embedded points coloured by source. 3-d points are drawn
/// with a fixed oblique projection.
pub fn plot_tsne(points: &[LabeledPoint], path: &Path) -> Result<()> {
    let Some(first) = points.first() else {
        return Err(Error::Length("no points to plot".into()));
    };
    let dims = first.coords.len();
    let text = font_available();
    let root = BitMapBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err(path))?;
    let groups = [(Source::Original, BLUE), (Source::Mapped, RED)];
    if dims == 3 {
        let lim = points
            .iter()
            .flat_map(|p| p.coords.iter().map(|c| c.abs()))
            .fold(1e-9f64, f64::max);
        let mut builder = ChartBuilder::on(&root);
        builder.margin(12);
        if text {
            builder.caption("t-SNE (3-d)", ("sans-serif", 20));
        }
        let mut chart = builder
            .build_cartesian_3d(-lim..lim, -lim..lim, -lim..lim)
            .map_err(draw_err(path))?;
        chart.with_projection(|mut p| {
            p.yaw = 0.6;
            p.pitch = 0.3;
            p.into_matrix()
        });
        for (src, color) in groups {
            let pts = points.iter().filter(|p| p.source == src).map(|p| (p.coords[0], p.coords[1], p.coords[2]));
            let series = chart
                .draw_series(pts.map(|c| Circle::new(c, 3, color.filled())))
                .map_err(draw_err(path))?;
            if text {
                series.label(src.to_string()).legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
            }
        }
        if text {
            chart.configure_series_labels().border_style(BLACK).draw().map_err(draw_err(path))?;
        }
    } else {
        let flat: Vec<(f64, f64)> = points.iter().map(|p| (p.coords[0], p.coords[1])).collect();
        let ((x0, x1), (y0, y1)) = bounds(&flat);
        let mut builder = ChartBuilder::on(&root);
        builder.margin(12);
        if text {
            builder.caption("t-SNE (2-d)", ("sans-serif", 20)).x_label_area_size(32).y_label_area_size(48);
        }
        let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(draw_err(path))?;
        if text {
            chart.configure_mesh().draw().map_err(draw_err(path))?;
        }
        for (src, color) in groups {
            let pts = points.iter().filter(|p| p.source == src).map(|p| (p.coords[0], p.coords[1]));
            let series = chart
                .draw_series(pts.map(|c| Circle::new(c, 3, color.filled())))
                .map_err(draw_err(path))?;
            if text {
                series.label(src.to_string()).legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
            }
        }
        if text {
            chart.configure_series_labels().border_style(BLACK).draw().map_err(draw_err(path))?;
        }
    }
    root.present().map_err(draw_err(path))?;
    Ok(())
}
