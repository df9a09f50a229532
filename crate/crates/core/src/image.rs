//! Grayscale image container, file I/O and size alignment.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bit depth of the file an image was decoded from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_level(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }
}

/// A single-channel image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
    source_bit_depth: BitDepth,
    pixel_size_nm: Option<f64>,
}

impl GrayImage {
    /// Wraps a pixel array, rejecting empty arrays and values outside `[0, 1]`.
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid("image must have at least one pixel"));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            pixels,
            source_bit_depth: BitDepth::Eight,
            pixel_size_nm: None,
        })
    }

    /// Wraps an arbitrary real array by clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(mut pixels: Array2<f64>) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(pixels)
    }

    /// Min-max rescales an arbitrary real array into `[0, 1]`.
    /// A constant array maps to all zeros.
    pub fn from_rescaled(pixels: Array2<f64>) -> Result<Self> {
        Self::from_clamped(rescale_unit(pixels))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl FnMut((usize, usize)) -> f64,
    ) -> Result<Self> {
        Self::new(Array2::from_shape_fn((height, width), f))
    }

    pub fn with_bit_depth(mut self, depth: BitDepth) -> Self {
        self.source_bit_depth = depth;
        self
    }

    pub fn with_pixel_size_nm(mut self, size: Option<f64>) -> Self {
        self.pixel_size_nm = size.filter(|s| *s > 0.0);
        self
    }

    /// Same metadata, new pixels (validated).
    pub fn with_pixels(&self, pixels: Array2<f64>) -> Result<Self> {
        Ok(Self::new(pixels)?
            .with_bit_depth(self.source_bit_depth)
            .with_pixel_size_nm(self.pixel_size_nm))
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[(row, col)]
    }

    pub fn source_bit_depth(&self) -> BitDepth {
        self.source_bit_depth
    }

    pub fn pixel_size_nm(&self) -> Option<f64> {
        self.pixel_size_nm
    }

    /// Quantizes back to integer levels of the source bit depth.
    pub fn to_levels(&self, depth: BitDepth) -> Array2<u16> {
        let max = depth.max_level();
        self.pixels.mapv(|v| (v * max).round().clamp(0.0, max) as u16)
    }
}

/// Min-max rescale into `[0, 1]`; constant input becomes zeros.
pub fn rescale_unit(mut a: Array2<f64>) -> Array2<f64> {
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        a.mapv_inplace(|v| (v - lo) / span);
    } else {
        a.fill(0.0);
    }
    a
}

/// Builds a normalized image from integer levels.
pub fn from_levels(levels: &Array2<u16>, depth: BitDepth) -> Result<GrayImage> {
    let max = depth.max_level();
    Ok(GrayImage::new(levels.mapv(|v| (v as f64 / max).min(1.0)))?.with_bit_depth(depth))
}

/// Loads an 8- or 16-bit PNG/TIFF. Color inputs are converted by channel mean.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    let decoded = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(img_err)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("{} has zero area", path.display())));
    }

    let (depth, channels, raw): (BitDepth, usize, Vec<f64>) = match decoded {
        DynamicImage::ImageLuma8(b) => (BitDepth::Eight, 1, to_f64(b.into_raw())),
        DynamicImage::ImageLumaA8(b) => (BitDepth::Eight, 2, to_f64(b.into_raw())),
        DynamicImage::ImageRgb8(b) => (BitDepth::Eight, 3, to_f64(b.into_raw())),
        DynamicImage::ImageRgba8(b) => (BitDepth::Eight, 4, to_f64(b.into_raw())),
        DynamicImage::ImageLuma16(b) => (BitDepth::Sixteen, 1, to_f64(b.into_raw())),
        DynamicImage::ImageLumaA16(b) => (BitDepth::Sixteen, 2, to_f64(b.into_raw())),
        DynamicImage::ImageRgb16(b) => (BitDepth::Sixteen, 3, to_f64(b.into_raw())),
        DynamicImage::ImageRgba16(b) => (BitDepth::Sixteen, 4, to_f64(b.into_raw())),
        other => (BitDepth::Sixteen, 3, to_f64(other.into_rgb16().into_raw())),
    };
    // Alpha is dropped; color channels are averaged.
    let color = match channels {
        1 | 2 => 1,
        _ => 3,
    };
    let max = depth.max_level();
    let pixels = Array2::from_shape_fn((h, w), |(r, c)| {
        let base = (r * w + c) * channels;
        let sum: f64 = raw[base..base + color].iter().sum();
        (sum / color as f64 / max).clamp(0.0, 1.0)
    });
    Ok(GrayImage::new(pixels)?.with_bit_depth(depth))
}

fn to_f64<T: Into<f64>>(v: Vec<T>) -> Vec<f64> {
    v.into_iter().map(Into::into).collect()
}

/// Writes an image. `.tif`/`.tiff` paths keep 16-bit precision when the image
/// came from a 16-bit source; everything else is written as 8-bit.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_tiff = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
        .unwrap_or(false);
    let (h, w) = img.dim();
    let result = if is_tiff && img.source_bit_depth() == BitDepth::Sixteen {
        let levels = img.to_levels(BitDepth::Sixteen);
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, levels.iter().copied().collect())
                .expect("buffer size matches dimensions");
        buf.save(path)
    } else {
        let levels = img.to_levels(BitDepth::Eight);
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
            w as u32,
            h as u32,
            levels.iter().map(|&v| v as u8).collect(),
        )
        .expect("buffer size matches dimensions");
        buf.save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Original size recorded by [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_rows == 0 && self.pad_cols == 0
    }

    pub fn crop(&self, img: &GrayImage) -> GrayImage {
        let view = img
            .pixels()
            .slice(ndarray::s![..self.height, ..self.width])
            .to_owned();
        img.with_pixels(view).expect("cropped pixels stay in range")
    }
}

/// Mirror index for reflect padding (edge sample not repeated).
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect-pads bottom/right so both sides are multiples of `m`.
pub fn pad_to_multiple(img: &GrayImage, m: usize) -> (GrayImage, CropRecord) {
    let m = m.max(1);
    let (h, w) = img.dim();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let record = CropRecord {
        height: h,
        width: w,
        pad_rows: ph - h,
        pad_cols: pw - w,
    };
    if record.is_empty() {
        return (img.clone(), record);
    }
    let src = img.pixels();
    let padded = Array2::from_shape_fn((ph, pw), |(r, c)| {
        src[(reflect_index(r as isize, h), reflect_index(c as isize, w))]
    });
    (img.with_pixels(padded).expect("padding copies valid pixels"), record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_luma8(path: &Path, w: u32, h: u32, v: u8) {
        ImageBuffer::<Luma<u8>, _>::from_pixel(w, h, Luma([v]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn eight_bit_extremes_normalize_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        let black = dir.path().join("black.png");
        write_luma8(&white, 5, 4, 255);
        write_luma8(&black, 5, 4, 0);
        let w = load_image(&white).unwrap();
        assert_eq!(w.dim(), (4, 5));
        assert!(w.pixels().iter().all(|&v| v == 1.0));
        assert_eq!(w.source_bit_depth(), BitDepth::Eight);
        assert!(load_image(&black).unwrap().pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sixteen_bit_tiff_normalizes_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.tif");
        ImageBuffer::<Luma<u16>, _>::from_pixel(3, 3, Luma([32767u16]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.source_bit_depth(), BitDepth::Sixteen);
        assert!(img.pixels().iter().all(|&v| v == 32767.0 / 65535.0));

        // 16-bit survives a TIFF round trip exactly.
        let out = dir.path().join("out.tif");
        save_image(&img, &out).unwrap();
        assert_eq!(load_image(&out).unwrap(), img);
    }

    #[test]
    fn rgb_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        ImageBuffer::<image::Rgb<u8>, _>::from_pixel(2, 2, image::Rgb([255, 0, 0]))
            .save(&p)
            .unwrap();
        let img = load_image(&p).unwrap();
        assert!((img.get(0, 0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/definitely/not/here.png").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(GrayImage::new(Array2::from_elem((2, 2), 1.5)).is_err());
        assert!(GrayImage::new(Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn pad_examples() {
        let img = GrayImage::filled(512, 512, 0.3).unwrap();
        let (p, rec) = pad_to_multiple(&img, 4);
        assert!(rec.is_empty());
        assert_eq!(p.dim(), (512, 512));

        let img = GrayImage::from_fn(130, 130, |(r, c)| ((r * 7 + c) % 13) as f64 / 13.0).unwrap();
        let (p, rec) = pad_to_multiple(&img, 4);
        assert_eq!(p.dim(), (132, 132));
        assert_eq!((rec.pad_rows, rec.pad_cols), (2, 2));
        // reflect: row 130 mirrors row 128
        assert_eq!(p.get(130, 5), img.get(128, 5));
        assert_eq!(rec.crop(&p), img);
    }

    #[test]
    fn reflect_index_small_lengths() {
        assert_eq!(reflect_index(3, 1), 0);
        assert_eq!(reflect_index(2, 2), 0);
        assert_eq!(reflect_index(3, 2), 1);
        assert_eq!(reflect_index(5, 4), 1);
    }

    proptest! {
        #[test]
        fn pad_crop_round_trip(h in 1usize..40, w in 1usize..40, m in 1usize..9, seed in 0u64..1000) {
            let img = GrayImage::from_fn(h, w, |(r, c)| {
                (((r * 31 + c * 17) as u64 ^ seed) % 101) as f64 / 100.0
            }).unwrap();
            let (p, rec) = pad_to_multiple(&img, m);
            prop_assert_eq!(p.height() % m, 0);
            prop_assert_eq!(p.width() % m, 0);
            prop_assert_eq!(rec.crop(&p), img);
        }

        #[test]
        fn level_round_trip_within_half_level(levels in proptest::collection::vec(0u16..=65535, 1..64), sixteen in any::<bool>()) {
            let depth = if sixteen { BitDepth::Sixteen } else { BitDepth::Eight };
            let max = depth.max_level() as u16;
            let raw: Vec<u16> = levels.iter().map(|v| v % max.saturating_add(1).max(1)).map(|v| v.min(max)).collect();
            let n = raw.len();
            let arr = Array2::from_shape_vec((1, n), raw.clone()).unwrap();
            let img = from_levels(&arr, depth).unwrap();
            let back = img.to_levels(depth);
            for (a, b) in raw.iter().zip(back.iter()) {
                prop_assert!((*a as f64 - *b as f64).abs() <= 0.5);
            }
        }
    }
}
