//! Training-image preparation: STM ripple band-pass, AFM streak notch with
//! dark mask and merge, SEM bright-strip mask with fast-marching inpainting.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, fftshift, ifft2, ifftshift, shifted_center};
use crate::filters::{convolve1d_reflect, gaussian_kernel};
use crate::image::{rescale_unit, GrayImage};

/// Boolean mask over the center-shifted frequency plane.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    pub mask: Array2<bool>,
    pub description: String,
}

impl FreqMask {
    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn radius_from_center(h: usize, w: usize) -> impl Fn(usize, usize) -> f64 {
    let (cy, cx) = shifted_center(h, w);
    move |r, c| ((r as f64 - cy as f64).powi(2) + (c as f64 - cx as f64).powi(2)).sqrt()
}

/// Multiplies a center-shifted spectrum by a mask.
pub fn apply_freq_mask(shifted: &Array2<Complex64>, mask: &FreqMask) -> Result<Array2<Complex64>> {
    if shifted.dim() != mask.dim() {
        return Err(Error::invalid(format!(
            "spectrum {:?} and mask {:?} differ in shape",
            shifted.dim(),
            mask.dim()
        )));
    }
    let zero = Complex64::new(0.0, 0.0);
    Ok(Zip::from(shifted).and(&mask.mask).map_collect(|&z, &m| if m { z } else { zero }))
}

/// Real part of the inverse transform of a center-shifted spectrum.
pub fn inverse_shifted(shifted: &Array2<Complex64>) -> Array2<f64> {
    ifft2(&ifftshift(shifted)).mapv(|z| z.re)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StmParams {
    pub r_low: f64,
    pub r_high: f64,
    /// Half-width (degrees) of the excluded wedge around the vertical frequency axis.
    pub theta_margin_deg: f64,
}

impl Default for StmParams {
    fn default() -> Self {
        Self { r_low: 20.0, r_high: 60.0, theta_margin_deg: 30.0 }
    }
}

/// Annulus `r_low < r < r_high` minus the wedges within `theta_margin` of
/// +-90 degrees.
pub fn stm_bandpass_mask(h: usize, w: usize, params: &StmParams) -> Result<FreqMask> {
    let StmParams { r_low, r_high, theta_margin_deg } = *params;
    if !(r_low >= 0.0 && r_low < r_high && r_high < h.min(w) as f64 / 2.0) {
        return Err(Error::invalid(format!(
            "band-pass radii must satisfy 0 <= r_low < r_high < min(H, W)/2, got {r_low}, {r_high} for {h}x{w}"
        )));
    }
    if !(0.0..90.0).contains(&theta_margin_deg) {
        return Err(Error::invalid(format!("angular margin must lie in [0, 90), got {theta_margin_deg}")));
    }
    let (cy, cx) = shifted_center(h, w);
    let mask = Array2::from_shape_fn((h, w), |(r, c)| {
        let ky = r as f64 - cy as f64;
        let kx = c as f64 - cx as f64;
        let rad = (kx * kx + ky * ky).sqrt();
        let theta = ky.atan2(kx).to_degrees();
        let off_axis = (theta - 90.0).abs().min((theta + 90.0).abs());
        rad > r_low && rad < r_high && off_axis > theta_margin_deg
    });
    Ok(FreqMask {
        mask,
        description: format!(
            "band-pass {r_low} < r < {r_high} px, excluding +-{theta_margin_deg} deg around the vertical frequency axis"
        ),
    })
}

#[derive(Clone, Debug)]
pub struct StmResult {
    pub mask: FreqMask,
    /// Real part of the inverse transform before rescaling.
    pub filtered: Array2<f64>,
    /// `filtered` min-max rescaled to `[0, 1]`.
    pub image: GrayImage,
}

pub fn stm_bandpass_enhance(img: &GrayImage, params: &StmParams) -> Result<StmResult> {
    let (h, w) = img.dim();
    let mask = stm_bandpass_mask(h, w, params)?;
    let spectrum = fftshift(&fft2(img.pixels()));
    let filtered = inverse_shifted(&apply_freq_mask(&spectrum, &mask)?);
    let image = img.with_pixels(rescale_unit(filtered.clone()))?;
    Ok(StmResult { mask, filtered, image })
}

/// Which spectrum lines the AFM notch profiles and removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NotchAxis {
    #[default]
    Columns,
    Rows,
}

impl std::str::FromStr for NotchAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "columns" | "cols" => Ok(NotchAxis::Columns),
            "rows" => Ok(NotchAxis::Rows),
            other => Err(Error::invalid(format!("unknown notch axis {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfmParams {
    pub dc_radius: f64,
    pub smooth_sigma: f64,
    pub notch_half_width: usize,
    pub dark_percentile: f64,
    /// Peaks must exceed `median + mad_factor * MAD` of the smoothed profile.
    pub mad_factor: f64,
    /// ...and `relative_floor` times the total spectral magnitude.
    pub relative_floor: f64,
    pub axis: NotchAxis,
}

impl Default for AfmParams {
    fn default() -> Self {
        Self {
            dc_radius: 50.0,
            smooth_sigma: 0.1,
            notch_half_width: 1,
            dark_percentile: 50.0,
            mad_factor: 3.0,
            relative_floor: 1e-9,
            axis: NotchAxis::Columns,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DarkMaskPair {
    /// 1.0 where the cleaned image is below the percentile threshold, else 0.0.
    pub dark_masked: GrayImage,
    pub merged: GrayImage,
}

#[derive(Clone, Debug)]
pub struct AfmResult {
    /// Column (or row) indices of detected streak lines in the shifted spectrum.
    pub notch_lines: Vec<usize>,
    pub profile: Vec<f64>,
    pub mask: FreqMask,
    pub cleaned: GrayImage,
    pub dark_threshold: f64,
    pub pair: DarkMaskPair,
}

/// Linear-interpolated percentile (`q` in `[0, 100]`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Indices of strict local maxima (plateaus resolved to their middle) with
/// height above `min_height`.
pub fn find_peaks_1d(x: &[f64], min_height: f64) -> Vec<usize> {
    let mut peaks = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                let mid = (i + ahead - 1) / 2;
                if x[mid] > min_height {
                    peaks.push(mid);
                }
                i = ahead;
            }
        }
        i += 1;
    }
    peaks
}

fn median_abs_deviation(x: &[f64]) -> (f64, f64) {
    let med = percentile(x, 50.0);
    let dev: Vec<f64> = x.iter().map(|v| (v - med).abs()).collect();
    (med, percentile(&dev, 50.0))
}

/// Notch filter for line streaks, followed by the dark mask and merge.
pub fn afm_notch_clean(img: &GrayImage, params: &AfmParams) -> Result<AfmResult> {
    let (h, w) = img.dim();
    if (h.min(w) as f64) < 2.0 * params.dc_radius {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than twice the DC radius {}",
            params.dc_radius
        )));
    }
    if !(0.0..=100.0).contains(&params.dark_percentile) {
        return Err(Error::invalid("dark percentile must lie in [0, 100]"));
    }
    let radius = radius_from_center(h, w);
    let spectrum = fftshift(&fft2(img.pixels()));
    let magnitude = spectrum.mapv(|z| z.norm());
    let constant = img.pixels().iter().all(|&v| v == img.pixels()[(0, 0)]);

    let n_lines = match params.axis {
        NotchAxis::Columns => w,
        NotchAxis::Rows => h,
    };
    let mut profile = vec![0.0; n_lines];
    for ((r, c), &m) in magnitude.indexed_iter() {
        if radius(r, c) > params.dc_radius {
            let line = if params.axis == NotchAxis::Columns { c } else { r };
            profile[line] += m;
        }
    }
    let smoothed = convolve1d_reflect(&profile, &gaussian_kernel(params.smooth_sigma, 4.0));
    let notch_lines = if constant {
        Vec::new()
    } else {
        let (med, mad) = median_abs_deviation(&smoothed);
        let floor = params.relative_floor * magnitude.sum();
        find_peaks_1d(&smoothed, (med + params.mad_factor * mad).max(floor))
    };

    let mut keep = Array2::from_elem((h, w), true);
    for &line in &notch_lines {
        let lo = line.saturating_sub(params.notch_half_width);
        let hi = (line + params.notch_half_width).min(n_lines - 1);
        for l in lo..=hi {
            for t in 0..(if params.axis == NotchAxis::Columns { h } else { w }) {
                let (r, c) = if params.axis == NotchAxis::Columns { (t, l) } else { (l, t) };
                if radius(r, c) > params.dc_radius {
                    keep[(r, c)] = false;
                }
            }
        }
    }
    let mask = FreqMask {
        mask: keep,
        description: format!(
            "notch {:?} {:?} half-width {}, DC radius {} preserved",
            params.axis, notch_lines, params.notch_half_width, params.dc_radius
        ),
    };
    let cleaned = if notch_lines.is_empty() {
        img.clone()
    } else {
        let filtered = inverse_shifted(&apply_freq_mask(&spectrum, &mask)?);
        img.with_pixels(filtered.mapv(|v| v.clamp(0.0, 1.0)))?
    };

    let values: Vec<f64> = cleaned.pixels().iter().copied().collect();
    let dark_threshold = percentile(&values, params.dark_percentile);
    let dark_masked = cleaned.with_pixels(cleaned.pixels().mapv(|v| if v < dark_threshold { 1.0 } else { 0.0 }))?;
    let merged = afm_merge(&dark_masked, img)?;
    Ok(AfmResult {
        notch_lines,
        profile: smoothed,
        mask,
        cleaned,
        dark_threshold,
        pair: DarkMaskPair { dark_masked, merged },
    })
}

/// 1.0 where the mask's 8-bit level exceeds 128, else the original.
pub fn afm_merge(dark_masked: &GrayImage, original: &GrayImage) -> Result<GrayImage> {
    if dark_masked.dim() != original.dim() {
        return Err(Error::invalid(format!(
            "mask {:?} and image {:?} differ in shape",
            dark_masked.dim(),
            original.dim()
        )));
    }
    let merged = Zip::from(dark_masked.pixels())
        .and(original.pixels())
        .map_collect(|&m, &o| if (m * 255.0).round() > 128.0 { 1.0 } else { o });
    original.with_pixels(merged)
}

/// Pixels whose 8-bit level is strictly above `threshold`.
pub fn sem_strip_mask(img: &GrayImage, threshold: f64) -> Array2<bool> {
    img.pixels().mapv(|v| (v * 255.0).round() > threshold)
}

const KNOWN: u8 = 0;
const BAND: u8 = 1;
const INSIDE: u8 = 2;

#[derive(PartialEq)]
struct Front {
    t: f64,
    seq: usize,
    at: (usize, usize),
}

impl Eq for Front {}

impl Ord for Front {
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Front {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn eikonal(flags: &Array2<u8>, t: &Array2<f64>, a: Option<(usize, usize)>, b: Option<(usize, usize)>) -> f64 {
    let known = |p: Option<(usize, usize)>| p.filter(|&p| flags[p] == KNOWN).map(|p| t[p]);
    match (known(a), known(b)) {
        (Some(t1), Some(t2)) => {
            let r = (2.0 - (t1 - t2).powi(2)).max(0.0).sqrt();
            let s = (t1 + t2 - r) / 2.0;
            if s >= t1 && s >= t2 {
                s
            } else if s + r >= t1 && s + r >= t2 {
                s + r
            } else {
                1.0 + t1.min(t2)
            }
        }
        (Some(t1), None) => 1.0 + t1,
        (None, Some(t2)) => 1.0 + t2,
        (None, None) => 1e6,
    }
}

/// Fast-marching inpainting: masked pixels are filled in order of distance
/// from the mask boundary, each as a direction-, distance- and
/// level-weighted first-order extrapolation from known pixels within
/// `radius`. Unmasked pixels are returned untouched.
pub fn inpaint_telea(img: &GrayImage, mask: &Array2<bool>, radius: f64) -> Result<GrayImage> {
    let (h, w) = img.dim();
    if mask.dim() != (h, w) {
        return Err(Error::invalid(format!("mask {:?} and image {:?} differ in shape", mask.dim(), (h, w))));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("inpainting radius must be positive, got {radius}")));
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Ok(img.clone());
    }
    if n_masked == h * w {
        return Err(Error::invalid("inpainting mask covers the whole image"));
    }

    let neighbors = |(r, c): (usize, usize)| {
        [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].into_iter().filter_map(move |(dr, dc)| {
            let rr = r as isize + dr;
            let cc = c as isize + dc;
            (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w).then_some((rr as usize, cc as usize))
        })
    };
    let at = |r: isize, c: isize| (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then_some((r as usize, c as usize));

    let mut flags = mask.mapv(|m| if m { INSIDE } else { KNOWN });
    let mut t = mask.mapv(|m| if m { 1e6 } else { 0.0 });
    let mut out = img.pixels().clone();
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    for ((r, c), &m) in mask.indexed_iter() {
        if !m && neighbors((r, c)).any(|p| mask[p]) {
            flags[(r, c)] = BAND;
            heap.push(Front { t: 0.0, seq, at: (r, c) });
            seq += 1;
        }
    }

    let reach = radius.ceil() as isize;
    while let Some(Front { at: p, .. }) = heap.pop() {
        if flags[p] == KNOWN {
            continue;
        }
        flags[p] = KNOWN;
        for q in neighbors(p).collect::<Vec<_>>() {
            if flags[q] != INSIDE {
                continue;
            }
            let (qr, qc) = (q.0 as isize, q.1 as isize);
            let tq = [
                eikonal(&flags, &t, at(qr - 1, qc), at(qr, qc - 1)),
                eikonal(&flags, &t, at(qr + 1, qc), at(qr, qc - 1)),
                eikonal(&flags, &t, at(qr - 1, qc), at(qr, qc + 1)),
                eikonal(&flags, &t, at(qr + 1, qc), at(qr, qc + 1)),
            ]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
            t[q] = tq;

            let grad_t = {
                let diff = |a: Option<(usize, usize)>, b: Option<(usize, usize)>| {
                    let ok = |p: Option<(usize, usize)>| p.filter(|&p| flags[p] != INSIDE);
                    match (ok(a), ok(b)) {
                        (Some(a), Some(b)) => (t[b] - t[a]) / 2.0,
                        (Some(a), None) => tq - t[a],
                        (None, Some(b)) => t[b] - tq,
                        (None, None) => 0.0,
                    }
                };
                (diff(at(qr - 1, qc), at(qr + 1, qc)), diff(at(qr, qc - 1), at(qr, qc + 1)))
            };

            let (mut num, mut den) = (0.0, 0.0);
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let Some(k) = at(qr + dr, qc + dc) else { continue };
                    if flags[k] == INSIDE || k == q {
                        continue;
                    }
                    let (ry, rx) = (-dr as f64, -dc as f64);
                    let d2 = ry * ry + rx * rx;
                    if d2 > radius * radius {
                        continue;
                    }
                    let mut dir = (ry * grad_t.0 + rx * grad_t.1).abs() / d2.sqrt();
                    if dir <= 0.01 {
                        dir = 1e-6;
                    }
                    let dst = 1.0 / d2;
                    let lev = 1.0 / (1.0 + (t[k] - tq).abs());
                    let wgt = dir * dst * lev;

                    let (kr, kc) = (k.0 as isize, k.1 as isize);
                    let grad_i = |a: Option<(usize, usize)>, b: Option<(usize, usize)>| {
                        let ok = |p: Option<(usize, usize)>| p.filter(|&p| flags[p] != INSIDE);
                        match (ok(a), ok(b)) {
                            (Some(a), Some(b)) => (out[b] - out[a]) / 2.0,
                            (Some(a), None) => out[k] - out[a],
                            (None, Some(b)) => out[b] - out[k],
                            (None, None) => 0.0,
                        }
                    };
                    let gy = grad_i(at(kr - 1, kc), at(kr + 1, kc));
                    let gx = grad_i(at(kr, kc - 1), at(kr, kc + 1));
                    num += wgt * (out[k] + gy * ry + gx * rx);
                    den += wgt;
                }
            }
            if den > 0.0 {
                out[q] = (num / den).clamp(0.0, 1.0);
            }
            flags[q] = BAND;
            heap.push(Front { t: tq, seq, at: q });
            seq += 1;
        }
    }
    img.with_pixels(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemParams {
    /// 8-bit intensity threshold; pixels strictly above it are masked.
    pub threshold: f64,
    pub radius: f64,
}

impl Default for SemParams {
    fn default() -> Self {
        Self { threshold: 130.0, radius: 3.0 }
    }
}

#[derive(Clone, Debug)]
pub struct SemResult {
    pub mask: Array2<bool>,
    pub cleaned: GrayImage,
}

/// Bright-strip removal: threshold mask, then inpaint.
pub fn sem_clean(img: &GrayImage, params: &SemParams) -> Result<SemResult> {
    let mask = sem_strip_mask(img, params.threshold);
    let cleaned = inpaint_telea(img, &mask, params.radius)?;
    Ok(SemResult { mask, cleaned })
}

/// Binary mask as a black/white image.
pub fn mask_image(mask: &Array2<bool>) -> Result<GrayImage> {
    GrayImage::new(mask.mapv(|m| if m { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&v, 50.0), 2.5);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 10.0) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn peaks_1d() {
        assert_eq!(find_peaks_1d(&[0.0, 1.0, 0.0, 2.0, 2.0, 2.0, 1.0, 3.0], 0.0), vec![1, 4]);
        assert_eq!(find_peaks_1d(&[0.0, 1.0, 0.0, 2.0, 0.0], 1.5), vec![3]);
        assert!(find_peaks_1d(&[1.0; 5], 0.0).is_empty());
    }

    #[test]
    fn bandpass_mask_geometry() {
        let m = stm_bandpass_mask(128, 128, &StmParams::default()).unwrap();
        assert!(!m.mask[(64, 64)]);
        assert!(m.mask[(64, 64 + 40)]);
        assert!(!m.mask[(64 + 40, 64)]);
        assert!(!m.mask[(64, 64 + 20)]);
        assert!(!m.mask[(64, 64 + 60)]);
        // 45 degrees passes, 70 degrees (within 30 of vertical) does not
        assert!(m.mask[(64 + 28, 64 + 28)]);
        let t = 70f64.to_radians();
        assert!(!m.mask[(64 + (40.0 * t.sin()).round() as usize, 64 + (40.0 * t.cos()).round() as usize)]);
        assert!(stm_bandpass_mask(128, 128, &StmParams { r_low: 60.0, r_high: 20.0, ..Default::default() }).is_err());
        assert!(stm_bandpass_mask(100, 128, &StmParams { r_high: 50.0, ..Default::default() }).is_err());
    }

    #[test]
    fn merge_branches() {
        let mask = GrayImage::new(Array2::from_shape_vec((1, 3), vec![200.0 / 255.0, 100.0 / 255.0, 0.0]).unwrap()).unwrap();
        let orig = GrayImage::new(Array2::from_shape_vec((1, 3), vec![0.2, 0.37, 0.9]).unwrap()).unwrap();
        let m = afm_merge(&mask, &orig).unwrap();
        assert_eq!(m.pixels().as_slice().unwrap(), &[1.0, 0.37, 0.9]);
        let zero = GrayImage::filled(1, 3, 0.0).unwrap();
        assert_eq!(afm_merge(&zero, &orig).unwrap(), orig);
        assert!(afm_merge(&GrayImage::filled(2, 3, 0.0).unwrap(), &orig).is_err());
    }

    #[test]
    fn strip_mask_is_strict() {
        let img = GrayImage::new(Array2::from_shape_vec((1, 3), vec![130.0 / 255.0, 131.0 / 255.0, 0.0]).unwrap()).unwrap();
        let m = sem_strip_mask(&img, 130.0);
        assert_eq!(m.as_slice().unwrap(), &[false, true, false]);
    }

    #[test]
    fn inpaint_single_pixel_in_constant_field() {
        let img = GrayImage::filled(9, 9, 0.42).unwrap();
        let mut mask = Array2::from_elem((9, 9), false);
        mask[(4, 4)] = true;
        let mut holed = img.pixels().clone();
        holed[(4, 4)] = 1.0;
        let out = inpaint_telea(&img.with_pixels(holed).unwrap(), &mask, 3.0).unwrap();
        assert!((out.get(4, 4) - 0.42).abs() < 1e-6);
    }

    #[test]
    fn inpaint_rejects_full_mask() {
        let img = GrayImage::filled(4, 4, 0.5).unwrap();
        assert!(inpaint_telea(&img, &Array2::from_elem((4, 4), true), 3.0).is_err());
        assert_eq!(inpaint_telea(&img, &Array2::from_elem((4, 4), false), 3.0).unwrap(), img);
    }

    #[test]
    fn constant_afm_image_is_returned_unchanged() {
        let img = GrayImage::filled(128, 128, 0.3).unwrap();
        let r = afm_notch_clean(&img, &AfmParams::default()).unwrap();
        assert!(r.notch_lines.is_empty());
        assert_eq!(r.cleaned, img);
        assert!(afm_notch_clean(&GrayImage::filled(64, 128, 0.3).unwrap(), &AfmParams::default()).is_err());
    }
}
