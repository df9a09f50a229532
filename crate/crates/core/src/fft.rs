//! 2D FFT helpers over `ndarray` arrays, with numpy-style shift semantics.

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

fn transform_axis(data: &mut Array2<Complex64>, axis: Axis, dir: FftDirection) {
    let len = data.len_of(axis);
    if len <= 1 {
        return;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft(len, dir);
    let mut buf = vec![Complex64::default(); len];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for mut lane in data.lanes_mut(axis) {
        for (b, v) in buf.iter_mut().zip(lane.iter()) {
            *b = *v;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (v, b) in lane.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
}

/// Forward 2D DFT (unnormalized), like `numpy.fft.fft2`.
pub fn fft2(data: &Array2<f64>) -> Array2<Complex64> {
    let mut out = data.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut out);
    out
}

pub fn fft2_inplace(data: &mut Array2<Complex64>) {
    transform_axis(data, Axis(1), FftDirection::Forward);
    transform_axis(data, Axis(0), FftDirection::Forward);
}

/// Inverse 2D DFT scaled by `1/(H*W)`, like `numpy.fft.ifft2`.
pub fn ifft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let mut out = data.clone();
    transform_axis(&mut out, Axis(1), FftDirection::Inverse);
    transform_axis(&mut out, Axis(0), FftDirection::Inverse);
    let scale = 1.0 / out.len() as f64;
    out.mapv_inplace(|v| v * scale);
    out
}

fn roll<T: Clone>(a: &Array2<T>, dr: usize, dc: usize) -> Array2<T> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        a[((r + h - dr % h.max(1)) % h, (c + w - dc % w.max(1)) % w)].clone()
    })
}

/// Moves the zero-frequency bin to `(H/2, W/2)`.
pub fn fftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    roll(a, h / 2, w / 2)
}

/// Inverse of [`fftshift`] (differs from it for odd sizes).
pub fn ifftshift<T: Clone>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    roll(a, h.div_ceil(2), w.div_ceil(2))
}

/// Center of the shifted spectrum.
pub fn shifted_center(h: usize, w: usize) -> (usize, usize) {
    (h / 2, w / 2)
}

/// Center-shifted magnitude spectrum.
pub fn shifted_magnitude(data: &Array2<f64>) -> Array2<f64> {
    fftshift(&fft2(data).mapv(|c| c.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(x: &Array2<f64>) -> Array2<Complex64> {
        let (h, w) = x.dim();
        Array2::from_shape_fn((h, w), |(u, v)| {
            let mut acc = Complex64::default();
            for ((r, c), val) in x.indexed_iter() {
                let ang = -2.0 * PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                acc += Complex64::from_polar(*val, ang);
            }
            acc
        })
    }

    #[test]
    fn matches_naive_dft_and_inverts() {
        let x = Array2::from_shape_fn((6, 5), |(r, c)| ((r * 3 + c * 5) % 7) as f64 - 2.5);
        let f = fft2(&x);
        let n = naive_dft(&x);
        for (a, b) in f.iter().zip(n.iter()) {
            assert!((a - b).norm() < 1e-9);
        }
        let back = ifft2(&f);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn shift_conventions_match_numpy() {
        let a = Array2::from_shape_fn((4, 5), |(r, c)| r * 10 + c);
        let s = fftshift(&a);
        // numpy: fftshift puts element (0,0) at (h//2, w//2)
        assert_eq!(s[(2, 2)], 0);
        assert_eq!(ifftshift(&s), a);
        let b = Array2::from_shape_fn((3, 3), |(r, c)| r * 3 + c);
        assert_eq!(ifftshift(&fftshift(&b)), b);
        assert_eq!(fftshift(&b)[(1, 1)], 0);
    }
}
