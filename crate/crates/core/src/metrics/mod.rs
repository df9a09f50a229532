//! Image-quality metrics: spectral peak-to-noise ratio and the total length
//! of detected line segments within an angle range.

mod lines;
mod pnr;

pub use lines::{
    canny, detect_lines, fold_angle, line_length_in_range, probabilistic_hough, LineParams, LineSet, Segment,
};
pub use pnr::{find_peaks, hann, pnr_db, pnr_score, PnrParams, PnrResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::par::Exec;

/// Imaging modality; selects detector defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Stm,
    Afm,
    Sem,
}

impl Modality {
    pub fn line_params(self) -> LineParams {
        let base = LineParams::default();
        match self {
            Modality::Stm => LineParams { sigma: 0.1, low: 1.0, high: 10.0, gap: 2, ..base },
            Modality::Afm => LineParams { sigma: 1.0, low: 1.0, high: 10.0, gap: 2, ..base },
            Modality::Sem => LineParams { sigma: 1.0, low: 5.0, high: 10.0, gap: 1, ..base },
        }
    }

    /// Angle window (degrees) for the line-length score.
    pub fn default_angle_range(self) -> (f64, f64) {
        match self {
            Modality::Stm => (-30.0, 30.0),
            Modality::Afm | Modality::Sem => (-10.0, 10.0),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stm" => Ok(Modality::Stm),
            "afm" => Ok(Modality::Afm),
            "sem" => Ok(Modality::Sem),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub modality: Modality,
    pub theta: (f64, f64),
    pub pnr: PnrParams,
    pub lines: LineParams,
}

impl EvalSettings {
    pub fn for_modality(modality: Modality) -> Self {
        Self {
            modality,
            theta: modality.default_angle_range(),
            pnr: PnrParams::default(),
            lines: modality.line_params(),
        }
    }
}

/// Both metrics for one image, with the intermediates used for plotting.
#[derive(Clone, Debug)]
pub struct ImageEvaluation {
    pub pnr: PnrResult,
    pub lines: LineSet,
    pub line_length: f64,
}

pub fn evaluate_image(img: &GrayImage, settings: &EvalSettings) -> Result<ImageEvaluation> {
    let pnr = pnr_score(img, &settings.pnr)?;
    let lines = detect_lines(img, &settings.lines)?;
    let line_length = line_length_in_range(&lines, settings.theta.0, settings.theta.1)?;
    Ok(ImageEvaluation { pnr, lines, line_length })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// Serialized as `null` when infinite (no peaks).
    pub pnr_db: f64,
    pub n_peaks: usize,
    pub p_peak: f64,
    pub p_noise: f64,
    pub line_length: f64,
    pub n_segments: usize,
}

impl From<&ImageEvaluation> for ImageMetrics {
    fn from(e: &ImageEvaluation) -> Self {
        Self {
            pnr_db: e.pnr.pnr_db,
            n_peaks: e.pnr.peak_coords.len(),
            p_peak: e.pnr.p_peak,
            p_noise: e.pnr.p_noise,
            line_length: e.line_length,
            n_segments: e.lines.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub settings: EvalSettings,
    pub noisy: ImageMetrics,
    pub denoised: ImageMetrics,
    pub delta_pnr_db: f64,
    pub delta_line_length: f64,
}

fn delta(before: f64, after: f64) -> f64 {
    if before == after {
        0.0
    } else {
        after - before
    }
}

impl MetricsReport {
    pub fn from_evaluations(settings: EvalSettings, noisy: &ImageEvaluation, denoised: &ImageEvaluation) -> Self {
        let noisy = ImageMetrics::from(noisy);
        let denoised = ImageMetrics::from(denoised);
        Self {
            delta_pnr_db: delta(noisy.pnr_db, denoised.pnr_db),
            delta_line_length: delta(noisy.line_length, denoised.line_length),
            settings,
            noisy,
            denoised,
        }
    }
}

/// Scores a noisy/denoised pair with the same settings.
pub fn evaluate_pair(noisy: &GrayImage, denoised: &GrayImage, settings: &EvalSettings) -> Result<MetricsReport> {
    if noisy.dim() != denoised.dim() {
        return Err(Error::invalid(format!(
            "noisy {:?} and denoised {:?} differ in shape",
            noisy.dim(),
            denoised.dim()
        )));
    }
    let a = evaluate_image(noisy, settings)?;
    let b = evaluate_image(denoised, settings)?;
    Ok(MetricsReport::from_evaluations(settings.clone(), &a, &b))
}

/// Evaluates many images independently.
pub fn evaluate_images(images: &[GrayImage], settings: &EvalSettings, exec: Exec) -> Result<Vec<ImageEvaluation>> {
    exec.map_slice(images, |img| evaluate_image(img, settings)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_defaults() {
        assert_eq!(Modality::Stm.line_params().sigma, 0.1);
        assert_eq!(Modality::Sem.line_params().low, 5.0);
        assert_eq!(Modality::Sem.line_params().gap, 1);
        assert_eq!(Modality::Afm.default_angle_range(), (-10.0, 10.0));
        assert_eq!("STM".parse::<Modality>().unwrap(), Modality::Stm);
        assert!("xrd".parse::<Modality>().is_err());
    }

    #[test]
    fn identical_images_have_zero_deltas() {
        let img = GrayImage::from_fn(64, 64, |(r, c)| ((r / 4 + c / 8) % 2) as f64).unwrap();
        let rep = evaluate_pair(&img, &img, &EvalSettings::for_modality(Modality::Stm)).unwrap();
        assert_eq!(rep.delta_pnr_db, 0.0);
        assert_eq!(rep.delta_line_length, 0.0);

        let flat = GrayImage::filled(64, 64, 0.5).unwrap();
        let rep = evaluate_pair(&flat, &flat, &EvalSettings::for_modality(Modality::Afm)).unwrap();
        assert_eq!(rep.noisy.pnr_db, f64::NEG_INFINITY);
        assert_eq!(rep.delta_pnr_db, 0.0);
        assert_eq!(rep.denoised.line_length, 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = GrayImage::filled(64, 64, 0.5).unwrap();
        let b = GrayImage::filled(64, 48, 0.5).unwrap();
        assert!(evaluate_pair(&a, &b, &EvalSettings::for_modality(Modality::Sem)).is_err());
    }
}
