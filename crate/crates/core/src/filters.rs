//! Small separable filters shared by the metrics and preprocessing code.

use ndarray::{Array2, Axis};

/// Sampled, normalized Gaussian with radius `round(truncate * sigma)`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma + 0.5) as usize;
    if sigma <= 0.0 || radius == 0 {
        return vec![1.0];
    }
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Half-sample symmetric reflection (`dcba|abcd|dcba`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// 1D correlation of `data` with `kernel` (odd length), reflecting at the ends.
pub fn convolve1d_reflect(data: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    (0..data.len())
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * data[reflect(i as isize + k as isize - r, data.len())])
                .sum()
        })
        .collect()
}

fn convolve_axis_constant(a: &Array2<f64>, kernel: &[f64], axis: Axis) -> Array2<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = Array2::zeros(a.dim());
    for (src, mut dst) in a.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let n = src.len() as isize;
        for i in 0..n {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = i + k as isize - r;
                if (0..n).contains(&j) {
                    acc += w * src[j as usize];
                }
            }
            dst[i as usize] = acc;
        }
    }
    out
}

/// Gaussian smoothing with zero padding, renormalized by the smoothed
/// support so that borders are not darkened.
pub fn gaussian_smooth(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma, 4.0);
    if k.len() == 1 {
        return a.clone();
    }
    let blur = |x: &Array2<f64>| convolve_axis_constant(&convolve_axis_constant(x, &k, Axis(0)), &k, Axis(1));
    let num = blur(a);
    let den = blur(&Array2::ones(a.dim()));
    num / den
}
