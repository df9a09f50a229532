//! Compact U-Net with hand-written backpropagation.
//!
//! The network is generic over [`Real`] so training runs in `f32` while
//! gradient checks run the exact same code in `f64`.

mod checkpoint;
mod layers;
mod optim;
mod unet;

pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, CheckpointMetadata, CHECKPOINT_FORMAT_VERSION};
pub use layers::{conv2d_backward, conv2d_forward, ConvShape};
pub use optim::{Adam, AdamConfig};
pub use unet::{denoise_image, DenoiseOptions, ForwardCache, LayerInfo, UNet, UNetSpec};

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of the network.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + MulAssign + Default + Send + Sync + Debug + 'static
{
    const DTYPE: safetensors::Dtype;

    /// # Safety
    /// Pointers and strides must address valid `m x k`, `k x n`, `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(values: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Vec<Self>;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite float conversion")
    }
}

impl Real for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(values: &[f32], out: &mut Vec<u8>) {
        out.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    }

    fn read_le(bytes: &[u8]) -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Real for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(values: &[f64], out: &mut Vec<u8>) {
        out.extend(values.iter().flat_map(|v| v.to_le_bytes()));
    }

    fn read_le(bytes: &[u8]) -> Vec<f64> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    }
}

/// Row-major strided matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// `C (m x n, row-major) = alpha * A (m x k) * B (k x n) + beta * C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; matrixmultiply reads A/B and writes C only
    // within the given extents.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// A batch of single-channel images, `N x 1 x H x W`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * height * width {
            return Err(Error::invalid(format!(
                "batch data has {} values, expected {n}x1x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { n, height, width, data })
    }

    pub fn zeros(n: usize, height: usize, width: usize) -> Self {
        Self { n, height, width, data: vec![T::zero(); n * height * width] }
    }

    /// Stacks equally sized 2D arrays.
    pub fn from_arrays<'a>(arrays: impl IntoIterator<Item = &'a ndarray::Array2<f64>>) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        let mut dims = None;
        for a in arrays {
            let d = a.dim();
            if *dims.get_or_insert(d) != d {
                return Err(Error::invalid("batch arrays must share one shape"));
            }
            data.extend(a.iter().map(|&v| T::from_f64_lossy(v)));
            n += 1;
        }
        let (h, w) = dims.unwrap_or((0, 0));
        Self::new(n, h, w, data)
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_array(&self, i: usize) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_fn((self.height, self.width), |(r, c)| {
            self.sample(i)[r * self.width + c].to_f64().unwrap_or(f64::NAN)
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, 1, self.height, self.width]
    }
}
