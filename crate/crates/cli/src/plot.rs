//! Static PNG rendering of a trend series.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_cross_mut, draw_filled_circle_mut, draw_line_segment_mut};

use crate::series::{PointStatus, TrendSeries};
use crate::CliError;

pub const WIDTH: u32 = 960;
pub const HEIGHT: u32 = 480;
const MARGIN: f32 = 48.0;

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
pub const RAW: Rgb<u8> = Rgb([170, 190, 230]);
pub const LINE: Rgb<u8> = Rgb([20, 70, 200]);
pub const REFUSED: Rgb<u8> = Rgb([210, 30, 30]);
pub const DELETED: Rgb<u8> = Rgb([120, 120, 120]);

/// Draws axes, the value polyline (broken at missing epochs) and a cross
/// on the baseline for every refused or deleted epoch. With smoothing the
/// raw values are drawn faintly underneath.
pub fn render(series: &TrendSeries) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (w, h) = (WIDTH as f32, HEIGHT as f32);
    let (left, right, top, bottom) = (MARGIN, w - MARGIN / 2.0, MARGIN / 2.0, h - MARGIN);
    draw_line_segment_mut(&mut img, (left, top), (left, bottom), AXIS);
    draw_line_segment_mut(&mut img, (left, bottom), (right, bottom), AXIS);

    let n = series.points.len();
    let raw: Vec<Option<f64>> = series.points.iter().map(|p| p.value).collect();
    let plotted = series.plotted();
    let max = raw
        .iter()
        .chain(&plotted)
        .flatten()
        .fold(0.0f64, |m, v| m.max(*v));
    let max = if max > 0.0 { max } else { 1.0 };
    let x = |i: usize| {
        if n <= 1 {
            (left + right) / 2.0
        } else {
            left + (right - left) * i as f32 / (n - 1) as f32
        }
    };
    let y = |v: f64| bottom - (bottom - top) * (v.max(0.0) / max) as f32;

    let tick_every = n.div_ceil(30).max(1);
    for i in (0..n).step_by(tick_every) {
        draw_line_segment_mut(&mut img, (x(i), bottom), (x(i), bottom + 4.0), AXIS);
    }

    let mut polyline = |values: &[Option<f64>], color: Rgb<u8>| {
        for i in 0..n {
            let Some(v) = values[i] else { continue };
            if let Some(Some(next)) = values.get(i + 1) {
                draw_line_segment_mut(&mut img, (x(i), y(v)), (x(i + 1), y(*next)), color);
            }
            if n <= 60 {
                draw_filled_circle_mut(&mut img, (x(i) as i32, y(v) as i32), 2, color);
            }
        }
    };
    if series.meta.smoothing.is_some() {
        polyline(&raw, RAW);
    }
    polyline(&plotted, LINE);

    for (i, p) in series.points.iter().enumerate() {
        let color = match p.status {
            PointStatus::Refused => REFUSED,
            PointStatus::Deleted => DELETED,
            _ => continue,
        };
        draw_cross_mut(&mut img, color, x(i) as i32, bottom as i32 - 6);
    }
    img
}

pub fn write_png(series: &TrendSeries, path: &Path) -> Result<(), CliError> {
    render(series).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
