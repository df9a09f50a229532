//! Spectral peak-to-noise ratio.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift, shifted_center};
use crate::image::{rescale_unit, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnrParams {
    /// Minimum peak separation (Chebyshev, pixels); also the excluded border width.
    pub min_distance: usize,
    /// Peak threshold relative to the maximum of the normalized log spectrum.
    pub threshold_rel: f64,
    /// Noise region: radius greater than this fraction of the center-to-corner distance.
    pub noise_radius_frac: f64,
    /// Peaks within this radius of the zero-frequency bin are discarded.
    pub dc_exclusion_radius: f64,
}

impl Default for PnrParams {
    fn default() -> Self {
        Self {
            min_distance: 10,
            threshold_rel: 0.05,
            noise_radius_frac: 0.5,
            dc_exclusion_radius: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnrResult {
    /// `10 log10(p_peak / p_noise)`; `-inf` when no peak was found.
    pub pnr_db: f64,
    /// (row, col) in the center-shifted spectrum.
    pub peak_coords: Vec<(usize, usize)>,
    pub p_peak: f64,
    pub p_noise: f64,
    /// `log1p(|F|)` of the windowed image, rescaled to `[0, 1]`.
    pub log_spectrum: Array2<f64>,
    /// `|F|^2` of the windowed image, center-shifted.
    pub power: Array2<f64>,
    pub noise_radius: f64,
}

impl PnrResult {
    pub fn has_peaks(&self) -> bool {
        !self.peak_coords.is_empty()
    }
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Maximum filter over a `(2r+1)^2` window with edge clamping.
fn max_filter(a: &Array2<f64>, r: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        let lo = x.saturating_sub(r);
        let hi = (x + r).min(w - 1);
        (lo..=hi).map(|c| a[(y, c)]).fold(f64::NEG_INFINITY, f64::max)
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        (lo..=hi).map(|rr| rows[(rr, x)]).fold(f64::NEG_INFINITY, f64::max)
    })
}

/// Local maxima in a `(2d+1)^2` window, above `threshold_rel * max`, outside
/// a `d`-pixel border, strongest first, greedily thinned so that kept peaks
/// are at least `d` apart in Chebyshev distance.
pub fn find_peaks(a: &Array2<f64>, min_distance: usize, threshold_rel: f64) -> Vec<(usize, usize)> {
    let (h, w) = a.dim();
    let min = a.iter().copied().fold(f64::INFINITY, f64::min);
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = min.max(threshold_rel * max);
    let maxed = max_filter(a, min_distance);
    if Zip::from(a).and(&maxed).all(|x, m| x == m) {
        return Vec::new();
    }
    let d = min_distance;
    let mut cands: Vec<(usize, usize)> = Vec::new();
    for r in d..h.saturating_sub(d) {
        for c in d..w.saturating_sub(d) {
            if a[(r, c)] == maxed[(r, c)] && a[(r, c)] > threshold {
                cands.push((r, c));
            }
        }
    }
    cands.sort_by(|p, q| a[*q].total_cmp(&a[*p]));
    if d <= 1 {
        return cands;
    }
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for p in cands {
        let far = kept.iter().all(|k| {
            let dist = p.0.abs_diff(k.0).max(p.1.abs_diff(k.1));
            dist >= d
        });
        if far {
            kept.push(p);
        }
    }
    kept
}

/// Peak-to-noise ratio of the Hann-windowed magnitude spectrum.
pub fn pnr_score(img: &GrayImage, params: &PnrParams) -> Result<PnrResult> {
    let (h, w) = img.dim();
    if h < 32 || w < 32 {
        return Err(Error::invalid(format!("PNR needs at least 32x32 pixels, got {h}x{w}")));
    }
    let normalized = rescale_unit(img.pixels().clone());
    let (wy, wx) = (hann(h), hann(w));
    let windowed = Array2::from_shape_fn((h, w), |(r, c)| normalized[(r, c)] * wy[r] * wx[c]);
    let spectrum = fftshift(&fft2(&windowed));
    let magnitude = spectrum.mapv(|z| z.norm());
    let power = spectrum.mapv(|z| z.norm_sqr());
    let log_spectrum = rescale_unit(magnitude.mapv(f64::ln_1p));

    let (cy, cx) = shifted_center(h, w);
    let radius = |r: usize, c: usize| ((r as f64 - cy as f64).powi(2) + (c as f64 - cx as f64).powi(2)).sqrt();
    let peak_coords: Vec<(usize, usize)> = find_peaks(&log_spectrum, params.min_distance, params.threshold_rel)
        .into_iter()
        .filter(|&(r, c)| radius(r, c) > params.dc_exclusion_radius)
        .collect();

    let r_max = (0..4)
        .map(|i| {
            let r = if i & 1 == 0 { 0 } else { h - 1 };
            let c = if i & 2 == 0 { 0 } else { w - 1 };
            radius(r, c)
        })
        .fold(0.0, f64::max);
    let noise_radius = params.noise_radius_frac * r_max;
    let (mut noise_sum, mut noise_n) = (0.0, 0usize);
    for ((r, c), &p) in power.indexed_iter() {
        if radius(r, c) > noise_radius {
            noise_sum += p;
            noise_n += 1;
        }
    }
    let p_noise = if noise_n > 0 { noise_sum / noise_n as f64 } else { 0.0 };
    let p_peak = if peak_coords.is_empty() {
        0.0
    } else {
        peak_coords.iter().map(|&rc| power[rc]).sum::<f64>() / peak_coords.len() as f64
    };
    let pnr_db = pnr_db(p_peak, p_noise, !peak_coords.is_empty());
    Ok(PnrResult { pnr_db, peak_coords, p_peak, p_noise, log_spectrum, power, noise_radius })
}

/// `10 log10(p_peak / p_noise)` with the sentinels used by [`pnr_score`].
pub fn pnr_db(p_peak: f64, p_noise: f64, has_peaks: bool) -> f64 {
    if !has_peaks || p_peak <= 0.0 {
        f64::NEG_INFINITY
    } else if p_noise <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (p_peak / p_noise).log10()
    }
}
