//! Static figures: loss curves, per-class F1 bars and cluster grids.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluator::EvalReport;
use crate::image::Image;
use crate::network::HeadType;
use crate::trainer::MetricRow;

pub const LOSS_FIGURE: &str = "loss_curves.svg";
pub const F1_FIGURE: &str = "per_class_f1.svg";
pub const GRID_FIGURE: &str = "cluster_grid.png";

fn draw_err(path: &Path) -> impl Fn(Box<dyn std::error::Error + '_>) -> Error + '_ {
    move |e| Error::Data(format!("drawing {}: {e}", path.display()))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}

/// Supervised and unsupervised losses per head type over the run's epochs,
/// one panel each.
pub fn plot_loss_curves(rows: &[MetricRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Data("no metric rows to plot".into()));
    }
    // Epoch position over the whole run, counting phase changes.
    let mut positions = Vec::with_capacity(rows.len());
    let mut last = None;
    let mut x = 0usize;
    for r in rows {
        let key = (r.phase, r.epoch);
        if last.is_some_and(|l| l != key) {
            x += 1;
        }
        last = Some(key);
        positions.push(x as f64);
    }
    let err = draw_err(path);
    let root = SVGBackend::new(path, (900, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let panels = root.split_evenly((2, 1));
    type Pick = fn(&MetricRow) -> f64;
    let sets: [(&str, Pick); 2] = [("supervised loss", |r| r.loss_s), ("unsupervised loss (-MI)", |r| r.loss_u)];
    for (panel, (title, pick)) in panels.iter().zip(sets) {
        let (lo, hi) = range(rows.iter().map(pick));
        let mut chart = ChartBuilder::on(panel)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..(x as f64 + 1.0), lo..hi)
            .map_err(|e| err(Box::new(e)))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .draw()
            .map_err(|e| err(Box::new(e)))?;
        for (head_type, color) in [(HeadType::Normal, BLUE), (HeadType::Overcluster, RED)] {
            let series: Vec<(f64, f64)> = rows
                .iter()
                .zip(&positions)
                .filter(|(r, _)| r.head_type == head_type)
                .map(|(r, &p)| (p, pick(r)))
                .collect();
            if series.is_empty() {
                continue;
            }
            chart
                .draw_series(LineSeries::new(series, color.stroke_width(2)))
                .map_err(|e| err(Box::new(e)))?
                .label(head_type.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(Box::new(e)))?;
    }
    root.present().map_err(|e| err(Box::new(e)))
}

/// Grouped bars of per-class F1 for the best head of each type. Classes
/// absent from the target split are left empty.
pub fn plot_per_class_f1(report: &EvalReport, class_names: Option<&[&str]>, path: &Path) -> Result<()> {
    let k = report.k_gt;
    let err = draw_err(path);
    let root = SVGBackend::new(path, (900, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("per-class F1 of the best heads", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..k as f64, 0.0..1.05)
        .map_err(|e| err(Box::new(e)))?;
    let label = |v: &f64| {
        let i = v.floor() as usize;
        match class_names {
            Some(names) if i < names.len() => names[i].to_string(),
            _ => i.to_string(),
        }
    };
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(k + 1)
        .x_label_formatter(&label)
        .y_desc("F1")
        .draw()
        .map_err(|e| err(Box::new(e)))?;
    for (offset, best, color, name) in [
        (0.1, &report.best_normal, BLUE, "normal"),
        (0.5, &report.best_overcluster, RED, "overcluster (mapped)"),
    ] {
        let bars: Vec<Rectangle<(f64, f64)>> = best
            .per_class_f1
            .iter()
            .enumerate()
            .filter_map(|(c, f)| f.map(|f| (c, f)))
            .map(|(c, f)| Rectangle::new([(c as f64 + offset, 0.0), (c as f64 + offset + 0.4, f)], color.filled()))
            .collect();
        chart
            .draw_series(bars)
            .map_err(|e| err(Box::new(e)))?
            .label(name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(Box::new(e)))?;
    root.present().map_err(|e| err(Box::new(e)))
}

/// One row per non-empty cluster showing up to `per_cluster` of its members
/// in input order. Single-channel images are drawn in gray.
pub fn cluster_grid(images: &[&Image], clusters: &[usize], per_cluster: usize, path: &Path) -> Result<()> {
    if images.is_empty() || images.len() != clusters.len() {
        return Err(Error::invalid(format!(
            "{} images for {} cluster ids",
            images.len(),
            clusters.len()
        )));
    }
    if per_cluster == 0 {
        return Err(Error::invalid("per_cluster must be positive"));
    }
    let (_, h, w) = images[0].dims();
    if images.iter().any(|im| (im.height(), im.width()) != (h, w)) {
        return Err(Error::invalid("cluster grid images differ in size"));
    }
    let mut members: std::collections::BTreeMap<usize, Vec<&Image>> = Default::default();
    for (&im, &c) in images.iter().zip(clusters) {
        let m = members.entry(c).or_default();
        if m.len() < per_cluster {
            m.push(im);
        }
    }
    const GAP: usize = 2;
    let (tw, th) = (w + GAP, h + GAP);
    let mut canvas = ::image::RgbImage::from_pixel(
        (per_cluster * tw + GAP) as u32,
        (members.len() * th + GAP) as u32,
        ::image::Rgb([255, 255, 255]),
    );
    for (row, ims) in members.values().enumerate() {
        for (col, im) in ims.iter().enumerate() {
            let channels = im.channels();
            for y in 0..h {
                for x in 0..w {
                    let px = |c: usize| (im.get(c.min(channels - 1), y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    let rgb = if channels >= 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
                    canvas.put_pixel((GAP + col * tw + x) as u32, (GAP + row * th + y) as u32, ::image::Rgb(rgb));
                }
            }
        }
    }
    canvas
        .save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Phase;

    fn rows() -> Vec<MetricRow> {
        let mut out = Vec::new();
        for (phase, epoch) in [(Phase::WarmUp, 0), (Phase::Main, 0), (Phase::Main, 1)] {
            for head_type in [HeadType::Normal, HeadType::Overcluster] {
                out.push(MetricRow {
                    phase,
                    epoch,
                    head_type,
                    loss_s: 1.0 / (epoch + 1) as f64,
                    loss_u: -0.5 * epoch as f64,
                    val_f1: None,
                    val_acc: None,
                });
            }
        }
        out
    }

    #[test]
    fn loss_curves_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(LOSS_FIGURE);
        plot_loss_curves(&rows(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg") && text.contains("overcluster"));
        assert!(plot_loss_curves(&[], &p).is_err());
    }

    #[test]
    fn grid_has_one_row_per_cluster() {
        let mut a = Image::zeros(1, 4, 4);
        a.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let b = Image::zeros(1, 4, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(GRID_FIGURE);
        cluster_grid(&[&a, &b, &a, &a], &[3, 1, 3, 3], 2, &p).unwrap();
        let img = ::image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (2 * 6 + 2, 2 * 6 + 2));
        // Cluster 1 comes first and holds the black image.
        assert_eq!(img.get_pixel(2, 2).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(2, 8).0, [255, 255, 255]);
        assert_eq!(img.get_pixel(8, 8).0, [255, 255, 255]);
        assert!(cluster_grid(&[&a], &[0, 1], 2, &p).is_err());
    }
}
