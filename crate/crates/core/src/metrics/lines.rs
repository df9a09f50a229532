//! Edge detection, probabilistic Hough segments and the angle-filtered
//! line-length score.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{gaussian_smooth, reflect};
use crate::image::GrayImage;

/// Edge and segment detector settings. Hysteresis thresholds are on the
/// 8-bit intensity scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    /// Minimum accumulator votes for a Hough line.
    pub threshold: usize,
    pub min_length: usize,
    pub gap: usize,
    pub seed: u64,
}

impl Default for LineParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low: 1.0,
            high: 10.0,
            threshold: 5,
            min_length: 1,
            gap: 2,
            seed: 0,
        }
    }
}

impl LineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.low > 0.0 && self.high > 0.0 && self.low < self.high) {
            return Err(Error::invalid(format!(
                "edge detector needs sigma >= 0 and 0 < low < high, got sigma={} low={} high={}",
                self.sigma, self.low, self.high
            )));
        }
        if self.threshold == 0 {
            return Err(Error::invalid("Hough threshold must be at least 1"));
        }
        Ok(())
    }
}

/// A detected segment, endpoints as `(x, y)` = (column, row).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: (i64, i64),
    pub end: (i64, i64),
}

impl Segment {
    pub fn length(&self) -> f64 {
        let dx = (self.end.0 - self.start.0) as f64;
        let dy = (self.end.1 - self.start.1) as f64;
        dx.hypot(dy)
    }

    /// `atan2(y2 - y1, x2 - x1)` in degrees, folded into `(-90, 90]`.
    pub fn angle_deg(&self) -> f64 {
        let dx = (self.end.0 - self.start.0) as f64;
        let dy = (self.end.1 - self.start.1) as f64;
        fold_angle(dy.atan2(dx).to_degrees())
    }
}

pub fn fold_angle(mut a: f64) -> f64 {
    while a > 90.0 {
        a -= 180.0;
    }
    while a <= -90.0 {
        a += 180.0;
    }
    a
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineSet {
    pub segments: Vec<Segment>,
    pub angles_deg: Vec<f64>,
    pub lengths: Vec<f64>,
}

impl LineSet {
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        let angles_deg = segments.iter().map(Segment::angle_deg).collect();
        let lengths = segments.iter().map(Segment::length).collect();
        Self { segments, angles_deg, lengths }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.lengths.iter().sum()
    }

    /// Whether segment `i` lies strictly inside `(theta1, theta2)`.
    pub fn in_range(&self, i: usize, theta1: f64, theta2: f64) -> bool {
        let a = self.angles_deg[i];
        a > theta1 && a < theta2
    }
}

/// Sum of the lengths of segments whose angle lies strictly inside
/// `(theta1, theta2)` degrees.
pub fn line_length_in_range(lines: &LineSet, theta1: f64, theta2: f64) -> Result<f64> {
    if !(theta1 < theta2) {
        return Err(Error::invalid(format!("angle range ({theta1}, {theta2}) is empty")));
    }
    Ok((0..lines.len())
        .filter(|&i| lines.in_range(i, theta1, theta2))
        .map(|i| lines.lengths[i])
        .sum())
}

fn sobel(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = a.dim();
    let at = |r: isize, c: isize| a[(reflect(r, h), reflect(c, w))];
    let mut gy = Array2::zeros((h, w));
    let mut gx = Array2::zeros((h, w));
    for r in 0..h as isize {
        for c in 0..w as isize {
            gy[(r as usize, c as usize)] = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            gx[(r as usize, c as usize)] = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
        }
    }
    (gy, gx)
}

/// Canny edge map: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression with gradient-direction interpolation, and 8-connected
/// hysteresis. The outermost pixel ring never carries edges.
pub fn canny(img: &GrayImage, sigma: f64, low: f64, high: f64) -> Array2<bool> {
    let (h, w) = img.dim();
    let mut edges = Array2::from_elem((h, w), false);
    if h < 3 || w < 3 {
        return edges;
    }
    let scaled = img.pixels().mapv(|v| v * 255.0);
    let smoothed = gaussian_smooth(&scaled, sigma);
    let (gi, gj) = sobel(&smoothed);
    let mag = Array2::from_shape_fn((h, w), |rc| gi[rc].hypot(gj[rc]));

    let mut candidate = Array2::from_elem((h, w), false);
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let (i, j) = (gi[(r, c)], gj[(r, c)]);
            let (ai, aj) = (i.abs(), j.abs());
            let m = mag[(r, c)];
            if m < low {
                continue;
            }
            let same_sign = (i >= 0.0 && j >= 0.0) || (i <= 0.0 && j <= 0.0);
            let opp_sign = (i <= 0.0 && j >= 0.0) || (i >= 0.0 && j <= 0.0);
            // When several direction sectors apply (ties, zero components),
            // the last one decides.
            let mut is_max = false;
            let mut test = |wgt: f64, p1: (usize, usize), p2: (usize, usize), m1: (usize, usize), m2: (usize, usize)| {
                let plus = mag[p2] * wgt + mag[p1] * (1.0 - wgt) <= m;
                let minus = mag[m2] * wgt + mag[m1] * (1.0 - wgt) <= m;
                is_max = plus && minus;
            };
            if same_sign && ai >= aj {
                test(aj / ai, (r + 1, c), (r + 1, c + 1), (r - 1, c), (r - 1, c - 1));
            }
            if same_sign && ai <= aj {
                test(ai / aj, (r, c + 1), (r + 1, c + 1), (r, c - 1), (r - 1, c - 1));
            }
            if opp_sign && ai <= aj {
                test(ai / aj, (r, c + 1), (r - 1, c + 1), (r, c - 1), (r + 1, c - 1));
            }
            if opp_sign && ai >= aj {
                test(aj / ai, (r - 1, c), (r - 1, c + 1), (r + 1, c), (r + 1, c - 1));
            }
            candidate[(r, c)] = is_max;
        }
    }

    let mut stack: Vec<(usize, usize)> = candidate
        .indexed_iter()
        .filter(|&(rc, &k)| k && mag[rc] >= high)
        .map(|(rc, _)| rc)
        .collect();
    for &rc in &stack {
        edges[rc] = true;
    }
    while let Some((r, c)) = stack.pop() {
        for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                if candidate[(nr, nc)] && !edges[(nr, nc)] {
                    edges[(nr, nc)] = true;
                    stack.push((nr, nc));
                }
            }
        }
    }
    edges
}

/// Progressive probabilistic Hough transform over 180 angles in
/// `[-90, 90)` degrees. Edge pixels are visited in a seeded random order.
pub fn probabilistic_hough(
    edges: &Array2<bool>,
    threshold: usize,
    min_length: usize,
    gap: usize,
    seed: u64,
) -> Vec<Segment> {
    const SHIFT: i64 = 16;
    const N_THETA: usize = 180;
    let (h, w) = edges.dim();
    let (hi, wi) = (h as i64, w as i64);
    let thetas: Vec<f64> = (0..N_THETA)
        .map(|k| -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / N_THETA as f64)
        .collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) = thetas.iter().map(|t| (t.cos(), t.sin())).unzip();
    let offset = ((h * h + w * w) as f64).sqrt().ceil() as i64;
    let n_rho = (2 * offset + 1) as usize;
    let mut accum = vec![0i64; n_rho * N_THETA];
    let bin = |x: i64, y: i64, j: usize| -> usize {
        let rho = (cos[j] * x as f64 + sin[j] * y as f64).round() as i64 + offset;
        rho as usize * N_THETA + j
    };

    let mut mask = edges.clone();
    let mut points: Vec<(i64, i64)> = edges
        .indexed_iter()
        .filter(|(_, &e)| e)
        .map(|((r, c), _)| (c as i64, r as i64))
        .collect();
    points.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut lines = Vec::new();
    for &(x, y) in &points {
        if !mask[(y as usize, x as usize)] {
            continue;
        }
        let mut max_value = threshold as i64 - 1;
        let mut max_theta = None;
        for j in 0..N_THETA {
            let b = bin(x, y, j);
            accum[b] += 1;
            if accum[b] > max_value {
                max_value = accum[b];
                max_theta = Some(j);
            }
        }
        let Some(t) = max_theta else { continue };

        let (a, b) = (-sin[t], cos[t]);
        let (mut x0, mut y0) = (x, y);
        let xflag = a.abs() > b.abs();
        let (dx0, dy0);
        if xflag {
            dx0 = if a > 0.0 { 1 } else { -1 };
            dy0 = (b * (1i64 << SHIFT) as f64 / a.abs()).round() as i64;
            y0 = (y0 << SHIFT) + (1 << (SHIFT - 1));
        } else {
            dy0 = if b > 0.0 { 1 } else { -1 };
            dx0 = (a * (1i64 << SHIFT) as f64 / b.abs()).round() as i64;
            x0 = (x0 << SHIFT) + (1 << (SHIFT - 1));
        }
        let to_pixel = |px: i64, py: i64| if xflag { (px, py >> SHIFT) } else { (px >> SHIFT, py) };

        let mut line_end = [(x, y); 2];
        for (k, end) in line_end.iter_mut().enumerate() {
            let (dx, dy) = if k == 0 { (dx0, dy0) } else { (-dx0, -dy0) };
            let (mut px, mut py) = (x0, y0);
            let mut g = 0;
            loop {
                let (x1, y1) = to_pixel(px, py);
                if x1 < 0 || x1 >= wi || y1 < 0 || y1 >= hi {
                    break;
                }
                g += 1;
                if mask[(y1 as usize, x1 as usize)] {
                    g = 0;
                    *end = (x1, y1);
                } else if g > gap {
                    break;
                }
                px += dx;
                py += dy;
            }
        }

        let good = (line_end[1].0 - line_end[0].0).unsigned_abs() as usize >= min_length
            || (line_end[1].1 - line_end[0].1).unsigned_abs() as usize >= min_length;

        for (k, end) in line_end.iter().enumerate() {
            let (dx, dy) = if k == 0 { (dx0, dy0) } else { (-dx0, -dy0) };
            let (mut px, mut py) = (x0, y0);
            loop {
                let (x1, y1) = to_pixel(px, py);
                let cell = (y1 as usize, x1 as usize);
                if mask[cell] {
                    if good {
                        for j in 0..N_THETA {
                            accum[bin(x1, y1, j)] -= 1;
                        }
                    }
                    mask[cell] = false;
                }
                if (x1, y1) == *end {
                    break;
                }
                px += dx;
                py += dy;
            }
        }
        if good {
            lines.push(Segment { start: line_end[0], end: line_end[1] });
        }
    }
    lines
}

/// Canny edges followed by probabilistic Hough segment extraction.
pub fn detect_lines(img: &GrayImage, params: &LineParams) -> Result<LineSet> {
    params.validate()?;
    let edges = canny(img, params.sigma, params.low, params.high);
    let segments = probabilistic_hough(&edges, params.threshold, params.min_length, params.gap, params.seed);
    Ok(LineSet::from_segments(segments))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_folding() {
        assert_eq!(fold_angle(90.0), 90.0);
        assert_eq!(fold_angle(-90.0), 90.0);
        assert_eq!(fold_angle(180.0), 0.0);
        assert_eq!(fold_angle(135.0), -45.0);
        let s = Segment { start: (10, 5), end: (0, 5) };
        assert_eq!(s.angle_deg(), 0.0);
        assert_eq!(s.length(), 10.0);
    }

    #[test]
    fn range_filter_examples() {
        assert_eq!(line_length_in_range(&LineSet::default(), -30.0, 30.0).unwrap(), 0.0);
        let flat = LineSet::from_segments(vec![Segment { start: (0, 0), end: (100, 0) }]);
        assert_eq!(line_length_in_range(&flat, -30.0, 30.0).unwrap(), 100.0);
        let diag = LineSet::from_segments(vec![Segment { start: (0, 0), end: (10, 10) }]);
        assert_eq!(line_length_in_range(&diag, -10.0, 10.0).unwrap(), 0.0);
        assert!(line_length_in_range(&flat, 10.0, -10.0).is_err());
    }

    #[test]
    fn blank_image_has_no_lines() {
        let img = GrayImage::filled(64, 64, 0.0).unwrap();
        assert!(detect_lines(&img, &LineParams::default()).unwrap().is_empty());
    }

    #[test]
    fn step_edge_is_detected_once() {
        let img = GrayImage::from_fn(32, 32, |(r, _)| if r >= 16 { 1.0 } else { 0.0 }).unwrap();
        let e = canny(&img, 1.0, 1.0, 10.0);
        let rows: Vec<usize> = (0..32).filter(|&r| e[(r, 10)]).collect();
        assert!(!rows.is_empty() && rows.iter().all(|&r| r == 15 || r == 16), "{rows:?}");
        assert!(!e[(15, 0)] && !e[(16, 31)]);
    }

    #[test]
    fn invalid_params() {
        let p = LineParams { low: 10.0, high: 1.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
