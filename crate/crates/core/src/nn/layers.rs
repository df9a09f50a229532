//! Single-sample layer kernels (channel-major `C x H x W` buffers).

use super::{gemm, MatRef, Real};

/// Geometry of a square-kernel, stride-1, same-padding convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.c_out
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unrolls `input` into a `(c_in*k*k) x (h*w)` matrix, zero padded.
fn im2col<T: Real>(shape: ConvShape, input: &[T], h: usize, w: usize, col: &mut Vec<T>) {
    let k = shape.kernel;
    let pad = (k / 2) as isize;
    let hw = h * w;
    col.clear();
    col.resize(shape.col_rows() * hw, T::zero());
    for ci in 0..shape.c_in {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &src_row[(x_lo as isize + dx) as usize..(x_hi as isize + dx) as usize];
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adds the columns of `col` back onto an image gradient (transpose of [`im2col`]).
fn col2im<T: Real>(shape: ConvShape, col: &[T], h: usize, w: usize, out: &mut [T]) {
    let k = shape.kernel;
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..shape.c_in {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    let dst = &mut plane[(base as isize + x_lo as isize + dx) as usize
                        ..(base as isize + x_hi as isize + dx) as usize];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `out = W * input + b`; `weight` is `[c_out, c_in, k, k]`, `bias` is `[c_out]`.
pub fn conv2d_forward<T: Real>(
    shape: ConvShape,
    weight: &[T],
    bias: &[T],
    input: &[T],
    h: usize,
    w: usize,
) -> Vec<T> {
    let hw = h * w;
    let mut out = Vec::with_capacity(shape.c_out * hw);
    for &b in bias {
        out.extend(std::iter::repeat(b).take(hw));
    }
    if shape.kernel == 1 {
        gemm(
            shape.c_out,
            shape.c_in,
            hw,
            T::one(),
            MatRef::rows(weight, shape.c_in),
            MatRef::rows(input, hw),
            T::one(),
            &mut out,
        );
    } else {
        let mut col = Vec::new();
        im2col(shape, input, h, w, &mut col);
        gemm(
            shape.c_out,
            shape.col_rows(),
            hw,
            T::one(),
            MatRef::rows(weight, shape.col_rows()),
            MatRef::rows(&col, hw),
            T::one(),
            &mut out,
        );
    }
    out
}

/// Accumulates weight/bias gradients and optionally returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    shape: ConvShape,
    weight: &[T],
    input: &[T],
    grad_out: &[T],
    h: usize,
    w: usize,
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    for (gb, plane) in grad_bias.iter_mut().zip(grad_out.chunks_exact(hw)) {
        let mut acc = T::zero();
        for &v in plane {
            acc += v;
        }
        *gb += acc;
    }
    let kk = shape.col_rows();
    if shape.kernel == 1 {
        gemm(
            shape.c_out,
            hw,
            kk,
            T::one(),
            MatRef::rows(grad_out, hw),
            MatRef::transposed(input, hw),
            T::one(),
            grad_weight,
        );
        return need_input_grad.then(|| {
            let mut gi = vec![T::zero(); shape.c_in * hw];
            gemm(
                kk,
                shape.c_out,
                hw,
                T::one(),
                MatRef::transposed(weight, kk),
                MatRef::rows(grad_out, hw),
                T::zero(),
                &mut gi,
            );
            gi
        });
    }
    let mut col = Vec::new();
    im2col(shape, input, h, w, &mut col);
    gemm(
        shape.c_out,
        hw,
        kk,
        T::one(),
        MatRef::rows(grad_out, hw),
        MatRef::transposed(&col, hw),
        T::one(),
        grad_weight,
    );
    if !need_input_grad {
        return None;
    }
    gemm(
        kk,
        shape.c_out,
        hw,
        T::one(),
        MatRef::transposed(weight, kk),
        MatRef::rows(grad_out, hw),
        T::zero(),
        &mut col,
    );
    let mut gi = vec![T::zero(); shape.c_in * hw];
    col2im(shape, &col, h, w, &mut gi);
    Some(gi)
}

pub(crate) fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Zeroes gradient entries where the activation was clipped.
pub(crate) fn relu_backward_inplace<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if !(*a > T::zero()) {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling; returns the pooled map and the flat argmax of each window.
pub(crate) fn maxpool2_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + (2 * y) * w + 2 * x;
                for idx in [
                    base + (2 * y) * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Real>(grad_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut gi = vec![T::zero(); input_len];
    for (g, &a) in grad_out.iter().zip(argmax) {
        gi[a as usize] += *g;
    }
    gi
}

/// Source taps for 2x bilinear upsampling with half-pixel centers
/// (`align_corners = false`).
fn upsample_taps(n_in: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub(crate) fn upsample2_forward<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx: Vec<_> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, la, lb)| (a, b, T::from_f64_lossy(la), T::from_f64_lossy(lb)))
        .collect();
    let mut out = vec![T::zero(); c * oh * ow];
    let mut row_a = vec![T::zero(); ow];
    let mut row_b = vec![T::zero(); ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ly0, ly1)) in ty.iter().enumerate() {
            let (ly0, ly1) = (T::from_f64_lossy(ly0), T::from_f64_lossy(ly1));
            for (buf, y) in [(&mut row_a, y0), (&mut row_b, y1)] {
                let src = &plane[y * w..(y + 1) * w];
                for (b, &(x0, x1, lx0, lx1)) in buf.iter_mut().zip(&tx) {
                    *b = lx0 * src[x0] + lx1 * src[x1];
                }
            }
            for (o, (a, b)) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(row_a.iter().zip(&row_b)) {
                *o = ly0 * *a + ly1 * *b;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = upsample_taps(h);
    let tx: Vec<_> = upsample_taps(w)
        .into_iter()
        .map(|(a, b, la, lb)| (a, b, T::from_f64_lossy(la), T::from_f64_lossy(lb)))
        .collect();
    let mut gi = vec![T::zero(); c * h * w];
    let mut row = vec![T::zero(); w];
    for ch in 0..c {
        let g = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gi[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly0, ly1)) in ty.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = T::zero());
            for (gv, &(x0, x1, lx0, lx1)) in g[oy * ow..(oy + 1) * ow].iter().zip(&tx) {
                row[x0] += lx0 * *gv;
                row[x1] += lx1 * *gv;
            }
            let (ly0, ly1) = (T::from_f64_lossy(ly0), T::from_f64_lossy(ly1));
            for (x, r) in row.iter().enumerate() {
                dst[y0 * w + x] += ly0 * *r;
                dst[y1 * w + x] += ly1 * *r;
            }
        }
    }
    gi
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 4-loop convolution used as the reference.
    fn naive_conv(shape: ConvShape, wt: &[f64], b: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = shape.kernel as isize;
        let pad = k / 2;
        let mut out = vec![0.0; shape.c_out * h * w];
        for co in 0..shape.c_out {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = b[co];
                    for ci in 0..shape.c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wi = ((co * shape.c_in + ci) * shape.kernel + ky as usize) * shape.kernel + kx as usize;
                                acc += wt[wi] * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(salt * 1442695040888963407);
                ((v >> 33) % 2001) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_for_both_kernels() {
        for (kernel, h, w) in [(3, 5, 7), (1, 4, 3), (3, 1, 1), (3, 2, 6)] {
            let shape = ConvShape { c_in: 3, c_out: 4, kernel };
            let wt = pseudo(shape.weight_len(), 1);
            let b = pseudo(4, 2);
            let x = pseudo(3 * h * w, 3);
            let got = conv2d_forward(shape, &wt, &b, &x, h, w);
            let want = naive_conv(shape, &wt, &b, &x, h, w);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> linear in x and W: check both gradients via finite differences.
        for (h, w) in [(4, 5), (8, 12), (6, 3)] {
        let shape = ConvShape { c_in: 2, c_out: 3, kernel: 3 };
        let wt = pseudo(shape.weight_len(), 4);
        let b = pseudo(3, 5);
        let x = pseudo(2 * h * w, 6);
        let dy = pseudo(3 * h * w, 7);
        let f = |wt: &[f64], x: &[f64]| -> f64 {
            conv2d_forward(shape, wt, &b, x, h, w).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(shape, &wt, &x, &dy, h, w, &mut gw, &mut gb, true).unwrap();
        let eps = 1e-6;
        for i in [0, 7, 20, wt.len() - 1] {
            let mut p = wt.clone();
            p[i] += eps;
            let mut m = wt.clone();
            m[i] -= eps;
            assert!(((f(&p, &x) - f(&m, &x)) / (2.0 * eps) - gw[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += eps;
            let mut m = x.clone();
            m[i] -= eps;
            assert!(((f(&wt, &p) - f(&wt, &m)) / (2.0 * eps) - gx[i]).abs() < 1e-7);
        }
        let bsum: f64 = dy[..h * w].iter().sum();
        assert!((gb[0] - bsum).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let (c, h, w) = (2, 3, 4);
        let x = pseudo(c * h * w, 8);
        let dy = pseudo(c * 4 * h * w, 9);
        let y = upsample2_forward(&x, c, h, w);
        let gx = upsample2_backward(&dy, c, h, w);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear() {
        // 1D check along width: [0, 1] -> [0, 0.25, 0.75, 1]
        let x = vec![0.0, 1.0];
        let y = upsample2_forward(&x, 1, 1, 2);
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (y, arg) = maxpool2_forward(&x, 1, 2, 4);
        assert_eq!(y, vec![5.0, 9.0]);
        let g = maxpool2_backward(&[1.0, 2.0], &arg, 8);
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }
}
