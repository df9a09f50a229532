use gdm_core::metrics::*;
use gdm_core::synth::{add_gaussian_noise, simulate_lattice, ArtifactSpec, LatticeParams};
use gdm_core::GrayImage;
use ndarray::Array2;
use std::f64::consts::{PI, TAU};

/// Direct O(N^3) separable DFT magnitude, center-shifted the numpy way.
fn dft_magnitude_shifted(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut rows = Array2::<(f64, f64)>::from_elem((h, w), (0.0, 0.0));
    for r in 0..h {
        for k in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for c in 0..w {
                let t = -TAU * (k * c) as f64 / w as f64;
                re += a[(r, c)] * t.cos();
                im += a[(r, c)] * t.sin();
            }
            rows[(r, k)] = (re, im);
        }
    }
    let mut out = Array2::zeros((h, w));
    for k in 0..w {
        for l in 0..h {
            let (mut re, mut im) = (0.0, 0.0);
            for r in 0..h {
                let t = -TAU * (l * r) as f64 / h as f64;
                let (x, y) = rows[(r, k)];
                re += x * t.cos() - y * t.sin();
                im += x * t.sin() + y * t.cos();
            }
            out[((l + h / 2) % h, (k + w / 2) % w)] = (re * re + im * im).sqrt();
        }
    }
    out
}

fn symmetric_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 * (1.0 - (TAU * i as f64 / (n - 1) as f64).cos())).collect()
}

fn sinusoid(n: usize, fy: f64, fx: f64) -> GrayImage {
    GrayImage::from_fn(n, n, |(r, c)| 0.5 + 0.5 * (TAU * (fy * r as f64 + fx * c as f64) / n as f64).sin()).unwrap()
}

#[test]
fn sinusoid_peaks_land_on_the_dft_oracle_bins() {
    for (fy, fx) in [(0.0, 16.0), (12.0, 20.0)] {
        let n = 128;
        let img = sinusoid(n, fy, fx);
        let hw = symmetric_hann(n);
        let lo = img.pixels().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.pixels().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let windowed = Array2::from_shape_fn((n, n), |(r, c)| (img.get(r, c) - lo) / (hi - lo) * hw[r] * hw[c]);
        let mag = dft_magnitude_shifted(&windowed);
        let (cy, cx) = (n / 2, n / 2);
        let mut bins: Vec<(usize, usize)> = mag
            .indexed_iter()
            .filter(|((r, c), _)| (*r as f64 - cy as f64).hypot(*c as f64 - cx as f64) > 3.0)
            .map(|(rc, _)| rc)
            .collect();
        bins.sort_by(|a, b| mag[*b].total_cmp(&mag[*a]));
        let mut oracle = vec![bins[0], bins[1]];
        oracle.sort();
        let want_a = ((cy as f64 + fy) as usize, (cx as f64 + fx) as usize);
        let want_b = ((cy as f64 - fy) as usize, (cx as f64 - fx) as usize);
        let mut expected = vec![want_a, want_b];
        expected.sort();
        assert_eq!(oracle, expected);

        let res = pnr_score(&img, &PnrParams::default()).unwrap();
        let mut got = res.peak_coords.clone();
        got.sort();
        assert_eq!(got, oracle);
        assert!(res.pnr_db > 20.0, "{}", res.pnr_db);
        // the metric's own spectrum agrees with the direct DFT
        for &rc in &oracle {
            assert!((res.power[rc].sqrt() / mag[rc] - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn white_noise_strictly_lowers_pnr() {
    let images = [
        sinusoid(128, 0.0, 16.0),
        simulate_lattice(&LatticeParams { image_size_px: 128, period_px: 10.0, seed: 1, ..Default::default() }).unwrap(),
    ];
    for img in &images {
        let clean = pnr_score(img, &PnrParams::default()).unwrap().pnr_db;
        for seed in 0..3 {
            let noisy = add_gaussian_noise(img, &ArtifactSpec::gaussian_noise(0.1, seed)).unwrap();
            let p = pnr_score(&noisy, &PnrParams::default()).unwrap().pnr_db;
            assert!(p < clean, "{p} !< {clean}");
        }
    }
}

#[test]
fn pnr_is_invariant_to_affine_intensity_changes() {
    let img = simulate_lattice(&LatticeParams { image_size_px: 96, period_px: 9.0, seed: 3, ..Default::default() }).unwrap();
    let base = pnr_score(&img, &PnrParams::default()).unwrap();
    let scaled = img.with_pixels(img.pixels().mapv(|v| 0.2 + 0.5 * v)).unwrap();
    let other = pnr_score(&scaled, &PnrParams::default()).unwrap();
    assert_eq!(base.peak_coords, other.peak_coords);
    assert!((base.pnr_db - other.pnr_db).abs() < 1e-9);
}

#[test]
fn pnr_identity_on_stored_intermediates() {
    let img = simulate_lattice(&LatticeParams { image_size_px: 128, period_px: 7.0, seed: 5, ..Default::default() }).unwrap();
    let res = pnr_score(&img, &PnrParams::default()).unwrap();
    assert!(res.has_peaks());
    let (h, w) = res.power.dim();
    let p_peak = res.peak_coords.iter().map(|&rc| res.power[rc]).sum::<f64>() / res.peak_coords.len() as f64;
    let (mut s, mut k) = (0.0, 0usize);
    for ((r, c), &p) in res.power.indexed_iter() {
        if ((r as f64 - (h / 2) as f64).powi(2) + (c as f64 - (w / 2) as f64).powi(2)).sqrt() > res.noise_radius {
            s += p;
            k += 1;
        }
    }
    let p_noise = s / k as f64;
    assert_eq!(p_peak, res.p_peak);
    assert_eq!(p_noise, res.p_noise);
    assert_eq!(res.pnr_db, 10.0 * (p_peak / p_noise).log10());
    let r_max = ((h / 2) as f64).hypot((w / 2) as f64);
    assert_eq!(res.noise_radius, 0.5 * r_max);
}

fn draw_thick_line(n: usize, x0: f64, y0: f64, x1: f64, y1: f64, half_width: f64) -> GrayImage {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    GrayImage::from_fn(n, n, |(r, c)| {
        let t = (((c as f64 - x0) * dx + (r as f64 - y0) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (x0 + t * dx, y0 + t * dy);
        if (c as f64 - px).hypot(r as f64 - py) <= half_width {
            1.0
        } else {
            0.0
        }
    })
    .unwrap()
}

#[test]
fn horizontal_segment_angles_and_lengths() {
    let img = GrayImage::from_fn(128, 128, |(r, c)| if r == 64 && c < 100 { 1.0 } else { 0.0 }).unwrap();
    let params = Modality::Stm.line_params();
    let lines = detect_lines(&img, &params).unwrap();
    assert!(!lines.is_empty());
    assert!(lines.angles_deg.iter().all(|a| a.abs() <= 2.0), "{:?}", lines.angles_deg);
    // one segment per edge of the one-pixel ridge, each close to the drawn length
    let long: Vec<f64> = lines.lengths.iter().copied().filter(|&l| l > 10.0).collect();
    assert_eq!(long.len(), 2, "{:?}", lines.segments);
    assert!(long.iter().all(|l| (90.0..=110.0).contains(l)), "{long:?}");
}

#[test]
fn tilted_segment_angle() {
    let t = 20f64.to_radians();
    let img = draw_thick_line(128, 10.0, 20.0, 10.0 + 100.0 * t.cos(), 20.0 + 100.0 * t.sin(), 2.0);
    let lines = detect_lines(&img, &Modality::Sem.line_params()).unwrap();
    let long: Vec<usize> = (0..lines.len()).filter(|&i| lines.lengths[i] > 30.0).collect();
    assert!(!long.is_empty());
    for i in long {
        assert!((lines.angles_deg[i] - 20.0).abs() < 3.0, "{}", lines.angles_deg[i]);
    }
    assert_eq!(line_length_in_range(&lines, -10.0, 10.0).unwrap() < lines.total_length(), true);
}

#[test]
fn line_length_identity_on_stored_segments() {
    let img = simulate_lattice(&LatticeParams { image_size_px: 96, period_px: 11.0, seed: 2, ..Default::default() }).unwrap();
    let lines = detect_lines(&img, &Modality::Afm.line_params()).unwrap();
    assert!(lines.len() > 3);
    for (t1, t2) in [(-10.0, 10.0), (-30.0, 30.0), (20.0, 80.0)] {
        let want: f64 = lines
            .segments
            .iter()
            .filter(|s| {
                let a = fold_angle(((s.end.1 - s.start.1) as f64).atan2((s.end.0 - s.start.0) as f64) * 180.0 / PI);
                a > t1 && a < t2
            })
            .map(|s| ((s.end.0 - s.start.0) as f64).hypot((s.end.1 - s.start.1) as f64))
            .sum();
        assert_eq!(line_length_in_range(&lines, t1, t2).unwrap(), want);
    }
    assert_eq!(line_length_in_range(&lines, -91.0, 91.0).unwrap(), lines.total_length());
    assert!(line_length_in_range(&lines, 10.0, -10.0).is_err());
}

#[test]
fn hough_is_deterministic_under_a_seed() {
    let img = simulate_lattice(&LatticeParams { image_size_px: 96, period_px: 8.0, seed: 9, ..Default::default() }).unwrap();
    let params = Modality::Stm.line_params();
    let a = detect_lines(&img, &params).unwrap();
    let b = detect_lines(&img, &params).unwrap();
    assert_eq!(a, b);
    let edges = canny(&img, 1.0, 1.0, 10.0);
    assert_eq!(probabilistic_hough(&edges, 5, 1, 2, 4), probabilistic_hough(&edges, 5, 1, 2, 4));
}

#[test]
fn batch_evaluation_matches_single_evaluation() {
    let images: Vec<GrayImage> = (0..3)
        .map(|s| simulate_lattice(&LatticeParams { image_size_px: 64, seed: s, ..Default::default() }).unwrap())
        .collect();
    let settings = EvalSettings::for_modality(Modality::Afm);
    let seq = evaluate_images(&images, &settings, gdm_core::Exec::Sequential).unwrap();
    let par = evaluate_images(&images, &settings, gdm_core::Exec::Parallel).unwrap();
    for ((s, p), img) in seq.iter().zip(&par).zip(&images) {
        let single = evaluate_image(img, &settings).unwrap();
        assert_eq!(s.pnr.pnr_db.to_bits(), single.pnr.pnr_db.to_bits());
        assert_eq!(p.pnr.pnr_db.to_bits(), single.pnr.pnr_db.to_bits());
        assert_eq!(s.lines, p.lines);
    }
}
