use std::path::Path;

use anyhow::{Context, Result};
use gdm_core::metrics::ImageEvaluation;
use gdm_core::GrayImage;
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_hollow_circle_mut, draw_line_segment_mut};
use ndarray::Array2;

const PEAK: Rgb<u8> = Rgb([255, 40, 40]);
const NOISE_RING: Rgb<u8> = Rgb([60, 200, 60]);
const IN_RANGE: Rgb<u8> = Rgb([255, 40, 40]);
const OUT_OF_RANGE: Rgb<u8> = Rgb([60, 120, 255]);

fn gray_rgb(a: &Array2<f64>) -> RgbImage {
    let (h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (a[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

/// Normalized log spectrum with detected peaks circled and the noise
/// annulus boundary drawn.
pub fn spectrum_overlay(eval: &ImageEvaluation) -> RgbImage {
    let mut img = gray_rgb(&eval.pnr.log_spectrum);
    let (h, w) = eval.pnr.log_spectrum.dim();
    for &(r, c) in &eval.pnr.peak_coords {
        draw_hollow_circle_mut(&mut img, (c as i32, r as i32), 5, PEAK);
    }
    draw_hollow_circle_mut(&mut img, ((w / 2) as i32, (h / 2) as i32), eval.pnr.noise_radius.round() as i32, NOISE_RING);
    img
}

/// The image with detected segments drawn: red inside the angle window,
/// blue outside.
pub fn lines_overlay(src: &GrayImage, eval: &ImageEvaluation, theta: (f64, f64)) -> RgbImage {
    let mut img = gray_rgb(src.pixels());
    for (i, s) in eval.lines.segments.iter().enumerate() {
        let color = if eval.lines.in_range(i, theta.0, theta.1) { IN_RANGE } else { OUT_OF_RANGE };
        draw_line_segment_mut(&mut img, (s.start.0 as f32, s.start.1 as f32), (s.end.0 as f32, s.end.1 as f32), color);
    }
    img
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
