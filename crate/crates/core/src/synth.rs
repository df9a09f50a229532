//! Synthetic test images: standing-wave (QPI) patterns around point
//! defects, a hexagonal lattice texture, and artifact injectors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

const ELECTRON_MASS_KG: f64 = 9.109_383_701_5e-31;
const ELECTRON_VOLT_J: f64 = 1.602_176_634e-19;
const HBAR_J_S: f64 = 1.054_571_817e-34;

/// Fermi wavevector in nm^-1 of a free-electron-like surface state:
/// `sqrt(2 m* mu) / hbar`.
pub fn fermi_wavevector_nm(effective_mass_ratio: f64, chemical_potential_ev: f64) -> Result<f64> {
    if !(effective_mass_ratio > 0.0 && chemical_potential_ev > 0.0) {
        return Err(Error::invalid(format!(
            "effective mass ratio and chemical potential must be positive, got {effective_mass_ratio} and {chemical_potential_ev} eV"
        )));
    }
    let p = (2.0 * effective_mass_ratio * ELECTRON_MASS_KG * chemical_potential_ev * ELECTRON_VOLT_J).sqrt();
    Ok(p / HBAR_J_S * 1e-9)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpiParams {
    pub effective_mass_ratio: f64,
    pub chemical_potential_ev: f64,
    pub image_size_px: usize,
    pub field_of_view_nm: f64,
    pub n_scatterers: usize,
    pub decay_exponent: f64,
    /// Distance (pixels) below which the decay denominator is held constant.
    pub r_min_px: f64,
    /// Radius (pixels) of the dark disk drawn at each defect.
    pub defect_radius_px: f64,
    /// Scattering phase added to `2 k_F r`.
    pub phase: f64,
    pub seed: u64,
}

impl Default for QpiParams {
    fn default() -> Self {
        Self {
            effective_mass_ratio: 0.38,
            chemical_potential_ev: 0.45,
            image_size_px: 256,
            field_of_view_nm: 30.0,
            n_scatterers: 12,
            decay_exponent: 0.5,
            r_min_px: 2.0,
            defect_radius_px: 2.0,
            phase: 0.0,
            seed: 0,
        }
    }
}

impl QpiParams {
    pub fn k_f_nm(&self) -> Result<f64> {
        fermi_wavevector_nm(self.effective_mass_ratio, self.chemical_potential_ev)
    }

    /// Ripple period `pi / k_F` in nm.
    pub fn ripple_period_nm(&self) -> Result<f64> {
        Ok(std::f64::consts::PI / self.k_f_nm()?)
    }

    pub fn pixel_size_nm(&self) -> f64 {
        self.field_of_view_nm / self.image_size_px as f64
    }
}

/// Defect positions (row, col) in pixels drawn for `params`.
pub fn qpi_scatterers(params: &QpiParams) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.image_size_px as f64;
    (0..params.n_scatterers)
        .map(|_| (rng.gen_range(0.0..n), rng.gen_range(0.0..n)))
        .collect()
}

/// Superposition of decaying circular standing waves,
/// `sum_i cos(2 k_F d_i + phase) / max(d_i, r_min)^decay`, with dark disks at
/// the defects, rescaled to `[0, 1]`.
pub fn simulate_qpi(params: &QpiParams) -> Result<GrayImage> {
    let k_f = params.k_f_nm()?;
    if !(params.field_of_view_nm > 0.0) || params.image_size_px == 0 {
        return Err(Error::invalid("field of view and image size must be positive"));
    }
    if params.n_scatterers == 0 {
        return Err(Error::invalid("at least one scatterer is required"));
    }
    let n = params.image_size_px;
    let px = params.pixel_size_nm();
    let centers = qpi_scatterers(params);
    let mut ldos = Array2::from_shape_fn((n, n), |(r, c)| {
        centers
            .iter()
            .map(|&(cr, cc)| {
                let d_px = ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                (2.0 * k_f * d_px * px + params.phase).cos() / d_px.max(params.r_min_px).powf(params.decay_exponent)
            })
            .sum::<f64>()
    });
    let floor = ldos.iter().copied().fold(f64::INFINITY, f64::min);
    for ((r, c), v) in ldos.indexed_iter_mut() {
        let inside = centers
            .iter()
            .any(|&(cr, cc)| (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= params.defect_radius_px.powi(2));
        if inside {
            *v = floor;
        }
    }
    Ok(GrayImage::from_rescaled(ldos)?.with_pixel_size_nm(Some(px)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeParams {
    pub image_size_px: usize,
    /// Nearest-neighbor spacing in pixels.
    pub period_px: f64,
    pub angle_deg: f64,
    pub seed: u64,
}

impl Default for LatticeParams {
    fn default() -> Self {
        Self { image_size_px: 256, period_px: 12.0, angle_deg: 0.0, seed: 0 }
    }
}

/// Hexagonal texture: three plane waves 60 degrees apart with seeded phases.
pub fn simulate_lattice(params: &LatticeParams) -> Result<GrayImage> {
    if !(params.period_px > 0.0) || params.image_size_px == 0 {
        return Err(Error::invalid("lattice period and size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let k = 4.0 * std::f64::consts::PI / (3f64.sqrt() * params.period_px);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|j| {
            let t = (params.angle_deg + 60.0 * j as f64).to_radians();
            (k * t.cos(), k * t.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let n = params.image_size_px;
    let a = Array2::from_shape_fn((n, n), |(r, c)| {
        waves.iter().map(|&(kx, ky, ph)| (kx * c as f64 + ky * r as f64 + ph).cos()).sum::<f64>()
    });
    GrayImage::from_rescaled(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Scanlines,
    BrightStrips,
    GaussianNoise,
}

/// Parameters of one artifact injector. Fields not used by a kind are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub amplitude: f64,
    /// Scan lines: jittered segments per image row. Bright strips: number of strips.
    pub density: f64,
    /// Gaussian noise standard deviation.
    pub sigma: f64,
    /// Scan lines: maximum tilt of jittered segments, degrees.
    pub angle_jitter_deg: f64,
    pub seed: u64,
}

impl ArtifactSpec {
    pub fn scanlines(amplitude: f64, seed: u64) -> Self {
        Self { kind: ArtifactKind::Scanlines, amplitude, density: 0.1, sigma: 0.0, angle_jitter_deg: 5.0, seed }
    }

    pub fn bright_strips(amplitude: f64, count: usize, seed: u64) -> Self {
        Self {
            kind: ArtifactKind::BrightStrips,
            amplitude,
            density: count as f64,
            sigma: 0.0,
            angle_jitter_deg: 5.0,
            seed,
        }
    }

    pub fn gaussian_noise(sigma: f64, seed: u64) -> Self {
        Self { kind: ArtifactKind::GaussianNoise, amplitude: 0.0, density: 0.0, sigma, angle_jitter_deg: 0.0, seed }
    }

    fn expect(&self, kind: ArtifactKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("expected a {kind:?} spec, got {:?}", self.kind)));
        }
        if !(self.amplitude >= 0.0 && self.sigma >= 0.0 && self.density >= 0.0) {
            return Err(Error::invalid("artifact amplitude, sigma and density must be non-negative"));
        }
        Ok(())
    }
}

/// Applies any artifact spec.
pub fn add_artifact(img: &GrayImage, spec: &ArtifactSpec) -> Result<GrayImage> {
    match spec.kind {
        ArtifactKind::Scanlines => add_scanlines(img, spec),
        ArtifactKind::BrightStrips => add_bright_strips(img, spec).map(|(i, _)| i),
        ArtifactKind::GaussianNoise => add_gaussian_noise(img, spec),
    }
}

/// Pixels on the line through `(r0, c0)` at `angle` (degrees from
/// horizontal), `len` pixels long, one per column.
fn raster_segment(r0: f64, c0: f64, angle: f64, len: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let slope = angle.to_radians().tan();
    (0..len)
        .filter_map(|i| {
            let c = c0 + i as f64;
            let r = (r0 + slope * i as f64).round();
            (c < w as f64 && r >= 0.0 && r < h as f64).then_some((r as usize, c as usize))
        })
        .collect()
}

/// Row-wise offsets (uniform in `[-amplitude, amplitude]`) plus short,
/// slightly tilted segments shifted by `+-amplitude`, emulating scan-line
/// streaks and zig-zags. Clamped to `[0, 1]`.
pub fn add_scanlines(img: &GrayImage, spec: &ArtifactSpec) -> Result<GrayImage> {
    spec.expect(ArtifactKind::Scanlines)?;
    if spec.amplitude == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = img.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = img.pixels().clone();
    for mut row in out.rows_mut() {
        let offset = rng.gen_range(-spec.amplitude..=spec.amplitude);
        row.mapv_inplace(|v| v + offset);
    }
    let n_segments = (spec.density * h as f64).round() as usize;
    for _ in 0..n_segments {
        let r0 = rng.gen_range(0.0..h as f64);
        let c0 = rng.gen_range(0.0..w as f64).floor();
        let len = rng.gen_range((w / 8).max(1)..=(w / 2).max(1));
        let angle = if spec.angle_jitter_deg > 0.0 {
            rng.gen_range(-spec.angle_jitter_deg..=spec.angle_jitter_deg)
        } else {
            0.0
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for rc in raster_segment(r0, c0, angle, len, h, w) {
            out[rc] += sign * spec.amplitude;
        }
    }
    img.with_pixels(out.mapv(|v| v.clamp(0.0, 1.0)))
}

/// Paints `density` bright strips, each 1-3 pixels thick, at intensity
/// `(131 + 124 * min(amplitude, 1)) / 255`. Returns the image and the
/// painted-pixel mask.
pub fn add_bright_strips(img: &GrayImage, spec: &ArtifactSpec) -> Result<(GrayImage, Array2<bool>)> {
    spec.expect(ArtifactKind::BrightStrips)?;
    let (h, w) = img.dim();
    let mut painted = Array2::from_elem((h, w), false);
    let mut out = img.pixels().clone();
    let value = (131.0 + 124.0 * spec.amplitude.min(1.0)) / 255.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..spec.density.round() as usize {
        let r0 = rng.gen_range(0.0..h as f64);
        let c0 = rng.gen_range(0.0..w as f64 * 0.75).floor();
        let len = rng.gen_range((w / 8).max(1)..=(w / 2).max(1));
        let angle = if spec.angle_jitter_deg > 0.0 {
            rng.gen_range(-spec.angle_jitter_deg..=spec.angle_jitter_deg)
        } else {
            0.0
        };
        let thickness = rng.gen_range(1..=3usize);
        for t in 0..thickness {
            for rc in raster_segment(r0 + t as f64, c0, angle, len, h, w) {
                out[rc] = value;
                painted[rc] = true;
            }
        }
    }
    Ok((img.with_pixels(out)?, painted))
}

/// Adds `N(0, sigma)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(img: &GrayImage, spec: &ArtifactSpec) -> Result<GrayImage> {
    spec.expect(ArtifactKind::GaussianNoise)?;
    if spec.sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noisy = img.pixels().mapv(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
    img.with_pixels(noisy)
}

/// Clean QPI image and the same image with scan-line artifacts, the
/// standard end-to-end denoising fixture.
pub fn qpi_scanline_pair(qpi: &QpiParams, amplitude: f64, artifact_seed: u64) -> Result<(GrayImage, GrayImage)> {
    let clean = simulate_qpi(qpi)?;
    let noisy = add_scanlines(&clean, &ArtifactSpec::scanlines(amplitude, artifact_seed))?;
    Ok((clean, noisy))
}

/// Radially averaged, mean-removed circular autocorrelation, indexed by
/// integer radius in pixels.
pub fn radial_autocorrelation(img: &GrayImage) -> Vec<f64> {
    use crate::fft::{fft2, ifft2};
    let (h, w) = img.dim();
    let mean = img.pixels().mean().unwrap_or(0.0);
    let centered = img.pixels().mapv(|v| v - mean);
    let f = fft2(&centered);
    let ac = ifft2(&f.mapv(|z| z * z.conj())).mapv(|z| z.re);
    let n_r = h.min(w) / 2;
    let mut sums = vec![0.0; n_r];
    let mut counts = vec![0usize; n_r];
    for ((r, c), v) in ac.indexed_iter() {
        let dy = r.min(h - r) as f64;
        let dx = c.min(w - c) as f64;
        let d = (dx * dx + dy * dy).sqrt().round() as usize;
        if d < n_r {
            sums[d] += v;
            counts[d] += 1;
        }
    }
    let zero = sums[0] / counts[0].max(1) as f64;
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n > 0 && zero != 0.0 { s / n as f64 / zero } else { 0.0 })
        .collect()
}

/// Sanity helper for tests and reports: fraction of pixels that changed.
pub fn changed_fraction(a: &GrayImage, b: &GrayImage) -> f64 {
    let n = a.pixels().len() as f64;
    a.pixels().iter().zip(b.pixels()).filter(|(x, y)| x != y).count() as f64 / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fermi_wavevector_from_constants() {
        // Independent evaluation in natural units: hbar^2 / (2 m_e) = 0.0380998 eV nm^2.
        let want = (0.38_f64 * 0.45 / 0.038_099_821).sqrt();
        let got = fermi_wavevector_nm(0.38, 0.45).unwrap();
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        assert!((got - 2.12).abs() < 0.01);
        let period = std::f64::consts::PI / got;
        assert!((period - 1.48).abs() < 0.01);
        assert!(fermi_wavevector_nm(0.38, 0.0).is_err());
        assert!(fermi_wavevector_nm(0.38, -0.1).is_err());
    }

    #[test]
    fn qpi_is_deterministic_and_normalized() {
        let p = QpiParams { image_size_px: 64, seed: 5, ..Default::default() };
        let a = simulate_qpi(&p).unwrap();
        let b = simulate_qpi(&p).unwrap();
        assert_eq!(a, b);
        let c = simulate_qpi(&QpiParams { seed: 6, ..p.clone() }).unwrap();
        assert_ne!(a, c);
        let min = a.pixels().iter().copied().fold(f64::INFINITY, f64::min);
        let max = a.pixels().iter().copied().fold(0.0, f64::max);
        assert_eq!((min, max), (0.0, 1.0));
        assert!(simulate_qpi(&QpiParams { n_scatterers: 0, ..p.clone() }).is_err());
        assert!(simulate_qpi(&QpiParams { field_of_view_nm: 0.0, ..p }).is_err());
    }

    #[test]
    fn zero_amplitude_artifacts_are_identity() {
        let img = simulate_lattice(&LatticeParams { image_size_px: 48, ..Default::default() }).unwrap();
        assert_eq!(add_scanlines(&img, &ArtifactSpec::scanlines(0.0, 1)).unwrap(), img);
        assert_eq!(add_gaussian_noise(&img, &ArtifactSpec::gaussian_noise(0.0, 1)).unwrap(), img);
        assert!(add_scanlines(&img, &ArtifactSpec::gaussian_noise(0.1, 1)).is_err());
    }

    #[test]
    fn strips_are_bright_enough() {
        let img = GrayImage::filled(64, 64, 0.2).unwrap();
        let (out, painted) = add_bright_strips(&img, &ArtifactSpec::bright_strips(0.0, 6, 3)).unwrap();
        assert!(painted.iter().any(|&p| p));
        for (rc, &p) in painted.indexed_iter() {
            if p {
                assert!(out.pixels()[rc] * 255.0 > 130.0);
            } else {
                assert_eq!(out.pixels()[rc], 0.2);
            }
        }
    }

    #[test]
    fn noise_is_reproducible() {
        let img = GrayImage::filled(32, 32, 0.5).unwrap();
        let spec = ArtifactSpec::gaussian_noise(0.1, 42);
        let a = add_gaussian_noise(&img, &spec).unwrap();
        assert_eq!(a, add_gaussian_noise(&img, &spec).unwrap());
        let sd = (a.pixels().mapv(|v| (v - 0.5).powi(2)).mean().unwrap()).sqrt();
        assert!((sd - 0.1).abs() < 0.01, "{sd}");
    }
}
