//! Patch tiling and blind-spot masking.

use ndarray::{s, Array2};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Side length of the square neighborhood used for blind-spot replacement.
pub const NEIGHBORHOOD: usize = 5;

/// A square crop of a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Array2<f64>,
    /// (row, col) of the top-left corner in the source image.
    pub origin: (usize, usize),
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.nrows()
    }
}

/// A patch whose masked sites have been replaced by neighbor values.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPatch {
    pub corrupted: Array2<f64>,
    pub mask_coords: Vec<(usize, usize)>,
    /// Uncorrupted values at `mask_coords`, in the same order.
    pub original_values: Vec<f64>,
}

impl MaskedPatch {
    pub fn size(&self) -> usize {
        self.corrupted.nrows()
    }

    /// Reconstructs the clean source patch.
    pub fn original(&self) -> Array2<f64> {
        let mut out = self.corrupted.clone();
        for (&(r, c), &v) in self.mask_coords.iter().zip(&self.original_values) {
            out[(r, c)] = v;
        }
        out
    }
}

/// Start offsets along one axis: a regular grid plus one edge-aligned start
/// when the grid does not reach the far border.
pub fn grid_positions(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&p| p + size <= len)
        .collect();
    let last = len - size;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Tiles `img` into `patch_size` squares with the given stride, adding
/// edge-aligned patches so the last row and column are covered.
pub fn extract_patches(img: &GrayImage, patch_size: usize, stride: usize) -> Result<Vec<Patch>> {
    let (h, w) = img.dim();
    if patch_size == 0 || patch_size > h.min(w) {
        return Err(Error::invalid(format!(
            "patch size {patch_size} does not fit a {h}x{w} image"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let rows = grid_positions(h, patch_size, stride);
    let cols = grid_positions(w, patch_size, stride);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            patches.push(Patch {
                pixels: img
                    .pixels()
                    .slice(s![r..r + patch_size, c..c + patch_size])
                    .to_owned(),
                origin: (r, c),
            });
        }
    }
    Ok(patches)
}

/// Number of masked sites for a patch of side `size`.
pub fn mask_count(size: usize, fraction: f64) -> usize {
    (fraction * (size * size) as f64).round() as usize
}

/// Selects `round(fraction * S^2)` distinct sites uniformly at random and
/// replaces each with the value of a random non-masked pixel from its 5x5
/// neighborhood.
pub fn apply_blindspot_mask<R: Rng + ?Sized>(
    patch: &Patch,
    fraction: f64,
    rng: &mut R,
) -> Result<MaskedPatch> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "mask fraction {fraction} must lie in (0, 1)"
        )));
    }
    let src = &patch.pixels;
    let (h, w) = src.dim();
    let n = ((fraction * (h * w) as f64).round() as usize).min(h * w);

    let mut masked = Array2::from_elem((h, w), false);
    let mut coords: Vec<(usize, usize)> = index::sample(rng, h * w, n)
        .into_iter()
        .map(|i| (i / w, i % w))
        .collect();
    coords.sort_unstable();
    for &(r, c) in &coords {
        masked[(r, c)] = true;
    }

    let half = (NEIGHBORHOOD / 2) as isize;
    let mut corrupted = src.clone();
    let mut original_values = Vec::with_capacity(n);
    let mut candidates = Vec::with_capacity(NEIGHBORHOOD * NEIGHBORHOOD);
    let mut fallback = Vec::with_capacity(NEIGHBORHOOD * NEIGHBORHOOD);
    for &(r, c) in &coords {
        original_values.push(src[(r, c)]);
        candidates.clear();
        fallback.clear();
        for dr in -half..=half {
            for dc in -half..=half {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                fallback.push((nr, nc));
                if !masked[(nr, nc)] {
                    candidates.push((nr, nc));
                }
            }
        }
        // Dense masks can leave no unmasked neighbor; fall back to any
        // neighbor's clean value.
        let pool = if candidates.is_empty() { &fallback } else { &candidates };
        if let Some(&(nr, nc)) = pool.get(rng.gen_range(0..pool.len().max(1))) {
            corrupted[(r, c)] = src[(nr, nc)];
        }
    }

    Ok(MaskedPatch {
        corrupted,
        mask_coords: coords,
        original_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |(r, c)| ((r * w + c) % 251) as f64 / 250.0).unwrap()
    }

    #[test]
    fn tiling_counts() {
        assert_eq!(extract_patches(&ramp(512, 512), 128, 128).unwrap().len(), 16);
        assert_eq!(extract_patches(&ramp(128, 128), 128, 128).unwrap().len(), 1);
        let p = extract_patches(&ramp(300, 300), 128, 128).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(grid_positions(300, 128, 128), vec![0, 128, 172]);
        assert_eq!(p[8].origin, (172, 172));
        assert_eq!(p[4].pixels[(0, 0)], ramp(300, 300).get(128, 128));
    }

    #[test]
    fn oversize_patch_is_rejected() {
        assert!(extract_patches(&ramp(100, 200), 128, 128).is_err());
        assert!(extract_patches(&ramp(200, 200), 128, 0).is_err());
    }

    #[test]
    fn mask_count_for_default_fraction() {
        let patch = extract_patches(&ramp(128, 128), 128, 128).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = apply_blindspot_mask(&patch, 0.1, &mut rng).unwrap();
        assert_eq!(m.mask_coords.len(), 1638);
        assert_eq!(m.original(), patch.pixels);
    }

    #[test]
    fn constant_patch_is_unchanged() {
        let patch = Patch { pixels: Array2::from_elem((16, 16), 0.42), origin: (0, 0) };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = apply_blindspot_mask(&patch, 0.3, &mut rng).unwrap();
        assert_eq!(m.corrupted, patch.pixels);
    }

    #[test]
    fn fraction_bounds() {
        let patch = Patch { pixels: Array2::zeros((8, 8)), origin: (0, 0) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(apply_blindspot_mask(&patch, f, &mut rng).is_err());
        }
    }

    #[test]
    fn seeded_masks_repeat() {
        let patch = extract_patches(&ramp(64, 64), 64, 64).unwrap().remove(0);
        let a = apply_blindspot_mask(&patch, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = apply_blindspot_mask(&patch, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn masking_invariants(size in 4usize..40, fraction in 0.01f64..0.9, seed in any::<u64>()) {
            let pixels = Array2::from_shape_fn((size, size), |(r, c)| ((r * 13 + c * 7 + seed as usize % 5) % 17) as f64 / 16.0);
            let patch = Patch { pixels, origin: (0, 0) };
            let m = apply_blindspot_mask(&patch, fraction, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let expected = mask_count(size, fraction);
            prop_assert_eq!(m.mask_coords.len(), expected);
            let mut seen = std::collections::HashSet::new();
            for &(r, c) in &m.mask_coords {
                prop_assert!(r < size && c < size);
                prop_assert!(seen.insert((r, c)));
            }
            let unchanged = patch.pixels.indexed_iter()
                .filter(|(rc, v)| !seen.contains(rc) && m.corrupted[*rc] == **v)
                .count();
            prop_assert_eq!(unchanged, size * size - expected);
        }

        #[test]
        fn patches_cover_every_pixel(h in 8usize..60, w in 8usize..60, s in 1usize..8, stride_frac in 0.1f64..1.0) {
            let size = s.min(h).min(w);
            let stride = ((size as f64 * stride_frac).ceil() as usize).max(1);
            let img = ramp(h, w);
            let patches = extract_patches(&img, size, stride).unwrap();
            let rows = grid_positions(h, size, stride).len();
            let cols = grid_positions(w, size, stride).len();
            prop_assert_eq!(patches.len(), rows * cols);
            prop_assert_eq!(rows, (h - size).div_ceil(stride) + 1);
            let mut covered = Array2::from_elem((h, w), false);
            for p in &patches {
                covered.slice_mut(s![p.origin.0..p.origin.0 + size, p.origin.1..p.origin.1 + size]).fill(true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
