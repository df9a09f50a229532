use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward_inplace,
    relu_inplace, upsample2_backward, upsample2_forward, ConvShape,
};
use super::{ImageBatch, Real};
use crate::error::{Error, Result};
use crate::image::{pad_to_multiple, GrayImage};
use crate::par::Exec;
use crate::patch::grid_positions;

/// Architecture description. Three encoder stages, two pooling steps,
/// two decoder stages, and a final 1x1 projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetSpec {
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub upsample: String,
    pub upsample_scale: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self::with_channels([32, 64, 128])
    }
}

impl UNetSpec {
    pub fn with_channels(channels: [usize; 3]) -> Self {
        Self {
            encoder_channels: channels.to_vec(),
            kernel: 3,
            padding: 1,
            pool: 2,
            upsample: "bilinear".into(),
            upsample_scale: 2,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.encoder_channels.len() == 3
            && self.encoder_channels.iter().all(|&c| c > 0)
            && self.kernel == 3
            && self.padding == 1
            && self.pool == 2
            && self.upsample == "bilinear"
            && self.upsample_scale == 2
            && self.in_channels == 1
            && self.out_channels == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("unsupported U-Net spec {self:?}")))
        }
    }

    /// Input side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.pool * self.pool
    }

    fn conv_shapes(&self) -> Vec<(&'static str, ConvShape)> {
        let [c0, c1, c2] = [
            self.encoder_channels[0],
            self.encoder_channels[1],
            self.encoder_channels[2],
        ];
        let conv = |c_in, c_out| ConvShape { c_in, c_out, kernel: 3 };
        vec![
            ("enc1.conv1", conv(self.in_channels, c0)),
            ("enc1.conv2", conv(c0, c0)),
            ("enc2.conv1", conv(c0, c1)),
            ("enc2.conv2", conv(c1, c1)),
            ("enc3.conv1", conv(c1, c2)),
            ("enc3.conv2", conv(c2, c2)),
            ("dec1.conv1", conv(c2 + c1, c1)),
            ("dec1.conv2", conv(c1, c1)),
            ("dec2.conv1", conv(c1 + c0, c0)),
            ("dec2.conv2", conv(c0, c0)),
            ("out", ConvShape { c_in: c0, c_out: self.out_channels, kernel: 1 }),
        ]
    }

    /// Closed-form parameter count for this spec.
    pub fn param_count(&self) -> usize {
        self.conv_shapes().iter().map(|(_, s)| s.param_count()).sum()
    }
}

/// One convolution's location inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: &'static str,
    pub shape: ConvShape,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerInfo {
    pub fn weight_dims(&self) -> [usize; 4] {
        [self.shape.c_out, self.shape.c_in, self.shape.kernel, self.shape.kernel]
    }
}

// Indices into `UNet::layers`.
const ENC1A: usize = 0;
const ENC1B: usize = 1;
const ENC2A: usize = 2;
const ENC2B: usize = 3;
const ENC3A: usize = 4;
const ENC3B: usize = 5;
const DEC1A: usize = 6;
const DEC1B: usize = 7;
const DEC2A: usize = 8;
const DEC2B: usize = 9;
const OUT: usize = 10;

/// The U-Net: a spec, a layer table and one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    spec: UNetSpec,
    layers: Vec<LayerInfo>,
    params: Vec<T>,
}

/// Activations retained from a training forward pass of one sample.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    h: usize,
    w: usize,
    x0: Vec<T>,
    e1a: Vec<T>,
    e1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<u32>,
    e2a: Vec<T>,
    e2: Vec<T>,
    p2: Vec<T>,
    arg2: Vec<u32>,
    e3a: Vec<T>,
    e3: Vec<T>,
    c1: Vec<T>,
    d1a: Vec<T>,
    d1: Vec<T>,
    c2: Vec<T>,
    d2a: Vec<T>,
    d2: Vec<T>,
}

impl<T: Real> UNet<T> {
    /// Builds a network with fan-in scaled uniform initialization,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn new(spec: UNetSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &net.layers {
            let fan_in = layer.shape.c_in * layer.shape.kernel * layer.shape.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let end = layer.bias_offset + layer.shape.c_out;
            for p in &mut net.params[layer.weight_offset..end] {
                *p = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    /// A network with every parameter set to zero.
    pub fn zeroed(spec: UNetSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for (name, shape) in spec.conv_shapes() {
            layers.push(LayerInfo {
                name,
                shape,
                weight_offset: offset,
                bias_offset: offset + shape.weight_len(),
            });
            offset += shape.param_count();
        }
        Ok(Self {
            spec,
            layers,
            params: vec![T::zero(); offset],
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        UNet {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| U::from_f64_lossy(p.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    fn weight(&self, idx: usize) -> &[T] {
        let l = &self.layers[idx];
        &self.params[l.weight_offset..l.bias_offset]
    }

    fn bias(&self, idx: usize) -> &[T] {
        let l = &self.layers[idx];
        &self.params[l.bias_offset..l.bias_offset + l.shape.c_out]
    }

    fn conv(&self, idx: usize, input: &[T], h: usize, w: usize, relu: bool) -> Vec<T> {
        let mut out = conv2d_forward(self.layers[idx].shape, self.weight(idx), self.bias(idx), input, h, w);
        if relu {
            relu_inplace(&mut out);
        }
        out
    }

    fn check_input(&self, batch: &ImageBatch<T>) -> Result<()> {
        let m = self.spec.size_multiple();
        if batch.height == 0 || batch.width == 0 || batch.height % m != 0 || batch.width % m != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be non-empty with sides divisible by {m}; pad with pad_to_multiple first",
                batch.height, batch.width
            )));
        }
        Ok(())
    }

    fn forward_one(&self, x0: &[T], h: usize, w: usize, keep: bool) -> (Vec<T>, Option<ForwardCache<T>>) {
        let [c0, c1, c2] = [
            self.spec.encoder_channels[0],
            self.spec.encoder_channels[1],
            self.spec.encoder_channels[2],
        ];
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

        let e1a = self.conv(ENC1A, x0, h, w, true);
        let e1 = self.conv(ENC1B, &e1a, h, w, true);
        let (p1, arg1) = maxpool2_forward(&e1, c0, h, w);
        let e2a = self.conv(ENC2A, &p1, h2, w2, true);
        let e2 = self.conv(ENC2B, &e2a, h2, w2, true);
        let (p2, arg2) = maxpool2_forward(&e2, c1, h2, w2);
        let e3a = self.conv(ENC3A, &p2, h4, w4, true);
        let e3 = self.conv(ENC3B, &e3a, h4, w4, true);

        let mut c1_cat = upsample2_forward(&e3, c2, h4, w4);
        c1_cat.extend_from_slice(&e2);
        let d1a = self.conv(DEC1A, &c1_cat, h2, w2, true);
        let d1 = self.conv(DEC1B, &d1a, h2, w2, true);

        let mut c2_cat = upsample2_forward(&d1, c1, h2, w2);
        c2_cat.extend_from_slice(&e1);
        let d2a = self.conv(DEC2A, &c2_cat, h, w, true);
        let d2 = self.conv(DEC2B, &d2a, h, w, true);
        let out = self.conv(OUT, &d2, h, w, false);

        let cache = keep.then(|| ForwardCache {
            h,
            w,
            x0: x0.to_vec(),
            e1a,
            e1,
            p1,
            arg1,
            e2a,
            e2,
            p2,
            arg2,
            e3a,
            e3,
            c1: c1_cat,
            d1a,
            d1,
            c2: c2_cat,
            d2a,
            d2,
        });
        (out, cache)
    }

    fn conv_back(
        &self,
        idx: usize,
        input: &[T],
        grad_out: &[T],
        h: usize,
        w: usize,
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Vec<T>> {
        let l = &self.layers[idx];
        let (gw, rest) = grads[l.weight_offset..].split_at_mut(l.shape.weight_len());
        let gb = &mut rest[..l.shape.c_out];
        conv2d_backward(l.shape, self.weight(idx), input, grad_out, h, w, gw, gb, need_input)
    }

    fn backward_one(&self, cache: &ForwardCache<T>, grad_out: &[T]) -> Vec<T> {
        let [c0, c1, c2] = [
            self.spec.encoder_channels[0],
            self.spec.encoder_channels[1],
            self.spec.encoder_channels[2],
        ];
        let (h, w) = (cache.h, cache.w);
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let mut g = vec![T::zero(); self.params.len()];

        let mut gd2 = self.conv_back(OUT, &cache.d2, grad_out, h, w, &mut g, true).expect("input grad");
        relu_backward_inplace(&cache.d2, &mut gd2);
        let mut gd2a = self.conv_back(DEC2B, &cache.d2a, &gd2, h, w, &mut g, true).expect("input grad");
        relu_backward_inplace(&cache.d2a, &mut gd2a);
        let gc2 = self.conv_back(DEC2A, &cache.c2, &gd2a, h, w, &mut g, true).expect("input grad");
        let (gu2, ge1_skip) = gc2.split_at(c1 * h * w);

        let mut gd1 = upsample2_backward(gu2, c1, h2, w2);
        relu_backward_inplace(&cache.d1, &mut gd1);
        let mut gd1a = self.conv_back(DEC1B, &cache.d1a, &gd1, h2, w2, &mut g, true).expect("input grad");
        relu_backward_inplace(&cache.d1a, &mut gd1a);
        let gc1 = self.conv_back(DEC1A, &cache.c1, &gd1a, h2, w2, &mut g, true).expect("input grad");
        let (gu1, ge2_skip) = gc1.split_at(c2 * h2 * w2);

        let mut ge3 = upsample2_backward(gu1, c2, h4, w4);
        relu_backward_inplace(&cache.e3, &mut ge3);
        let mut ge3a = self.conv_back(ENC3B, &cache.e3a, &ge3, h4, w4, &mut g, true).expect("input grad");
        relu_backward_inplace(&cache.e3a, &mut ge3a);
        let gp2 = self.conv_back(ENC3A, &cache.p2, &ge3a, h4, w4, &mut g, true).expect("input grad");

        let mut ge2 = maxpool2_backward(&gp2, &cache.arg2, c1 * h2 * w2);
        for (a, b) in ge2.iter_mut().zip(ge2_skip) {
            *a += *b;
        }
        relu_backward_inplace(&cache.e2, &mut ge2);
        let mut ge2a = self.conv_back(ENC2B, &cache.e2a, &ge2, h2, w2, &mut g, true).expect("input grad");
        relu_backward_inplace(&cache.e2a, &mut ge2a);
        let gp1 = self.conv_back(ENC2A, &cache.p1, &ge2a, h2, w2, &mut g, true).expect("input grad");

        let mut ge1 = maxpool2_backward(&gp1, &cache.arg1, c0 * h * w);
        for (a, b) in ge1.iter_mut().zip(ge1_skip) {
            *a += *b;
        }
        relu_backward_inplace(&cache.e1, &mut ge1);
        let mut ge1a = self.conv_back(ENC1B, &cache.e1a, &ge1, h, w, &mut g, true).expect("input grad");
        relu_backward_inplace(&cache.e1a, &mut ge1a);
        self.conv_back(ENC1A, &cache.x0, &ge1a, h, w, &mut g, false);
        g
    }

    /// Inference forward pass over a `B x 1 x S x S` batch.
    pub fn forward(&self, batch: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        self.forward_with(Exec::default(), batch)
    }

    pub fn forward_with(&self, exec: Exec, batch: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        self.check_input(batch)?;
        let outs = exec.map(batch.n, |i| self.forward_one(batch.sample(i), batch.height, batch.width, false).0);
        ImageBatch::new(batch.n, batch.height, batch.width, outs.concat())
    }

    /// Forward pass that keeps the activations needed by [`UNet::backward_with`].
    pub fn forward_train_with(
        &self,
        exec: Exec,
        batch: &ImageBatch<T>,
    ) -> Result<(ImageBatch<T>, Vec<ForwardCache<T>>)> {
        self.check_input(batch)?;
        let results = exec.map(batch.n, |i| self.forward_one(batch.sample(i), batch.height, batch.width, true));
        let mut data = Vec::with_capacity(batch.data.len());
        let mut caches = Vec::with_capacity(batch.n);
        for (out, cache) in results {
            data.extend(out);
            caches.push(cache.expect("cache requested"));
        }
        Ok((ImageBatch::new(batch.n, batch.height, batch.width, data)?, caches))
    }

    /// Parameter gradient of `sum(grad_out * output)`, summed over the batch
    /// in sample order.
    pub fn backward_with(&self, exec: Exec, caches: &[ForwardCache<T>], grad_out: &ImageBatch<T>) -> Vec<T> {
        assert_eq!(caches.len(), grad_out.n, "one cache per sample");
        let per_sample = exec.map(caches.len(), |i| self.backward_one(&caches[i], grad_out.sample(i)));
        let mut total = vec![T::zero(); self.params.len()];
        for g in per_sample {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    }
}

/// Inference settings for [`denoise_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseOptions {
    /// Images with more (padded) pixels than this are processed in tiles.
    pub max_whole_pixels: usize,
    pub tile: usize,
    pub overlap: usize,
    pub exec: Exec,
}

impl Default for DenoiseOptions {
    fn default() -> Self {
        Self {
            max_whole_pixels: 2048 * 2048,
            tile: 128,
            overlap: 32,
            exec: Exec::default(),
        }
    }
}

fn feather(len: usize, overlap: usize, at_start: bool, at_end: bool) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let ramp = (overlap + 1) as f64;
            let a = if at_start { 1.0 } else { ((i + 1) as f64 / ramp).min(1.0) };
            let b = if at_end { 1.0 } else { ((len - i) as f64 / ramp).min(1.0) };
            a.min(b)
        })
        .collect()
}

/// Denoises a full image: reflect-pad to a multiple of 4, run the fully
/// convolutional network once, crop back and clamp to `[0, 1]`. Oversized
/// inputs fall back to overlapping tiles blended by linear feathering.
pub fn denoise_image(model: &UNet<f32>, img: &GrayImage, opts: &DenoiseOptions) -> Result<GrayImage> {
    let m = model.spec().size_multiple();
    let (padded, crop) = pad_to_multiple(img, m);
    let (h, w) = padded.dim();
    let out = if h * w <= opts.max_whole_pixels {
        let batch = ImageBatch::<f32>::from_arrays([padded.pixels()])?;
        model.forward_with(opts.exec, &batch)?.sample_array(0)
    } else {
        let tile_h = (opts.tile.max(m) / m * m).min(h);
        let tile_w = (opts.tile.max(m) / m * m).min(w);
        let rows = grid_positions(h, tile_h, tile_h.saturating_sub(opts.overlap).max(m));
        let cols = grid_positions(w, tile_w, tile_w.saturating_sub(opts.overlap).max(m));
        let mut tiles = Vec::new();
        for &r in &rows {
            for &c in &cols {
                tiles.push((r, c));
            }
        }
        let arrays: Vec<_> = tiles
            .iter()
            .map(|&(r, c)| {
                padded
                    .pixels()
                    .slice(ndarray::s![r..r + tile_h, c..c + tile_w])
                    .to_owned()
            })
            .collect();
        let batch = ImageBatch::<f32>::from_arrays(arrays.iter())?;
        let pred = model.forward_with(opts.exec, &batch)?;
        let mut acc = ndarray::Array2::<f64>::zeros((h, w));
        let mut wsum = ndarray::Array2::<f64>::zeros((h, w));
        for (i, &(r, c)) in tiles.iter().enumerate() {
            let fy = feather(tile_h, opts.overlap, r == 0, r + tile_h == h);
            let fx = feather(tile_w, opts.overlap, c == 0, c + tile_w == w);
            let p = pred.sample_array(i);
            for y in 0..tile_h {
                for x in 0..tile_w {
                    let wgt = fy[y] * fx[x];
                    acc[(r + y, c + x)] += wgt * p[(y, x)];
                    wsum[(r + y, c + x)] += wgt;
                }
            }
        }
        acc / wsum
    };
    let restored = GrayImage::from_clamped(out)?
        .with_bit_depth(img.source_bit_depth())
        .with_pixel_size_nm(img.pixel_size_nm());
    Ok(crop.crop(&restored))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent per-layer count: 3x3 conv has 9*c_in*c_out + c_out parameters.
    fn hand_count(c: [usize; 3]) -> usize {
        let conv3 = |i: usize, o: usize| 9 * i * o + o;
        conv3(1, c[0]) + conv3(c[0], c[0])
            + conv3(c[0], c[1]) + conv3(c[1], c[1])
            + conv3(c[1], c[2]) + conv3(c[2], c[2])
            + conv3(c[2] + c[1], c[1]) + conv3(c[1], c[1])
            + conv3(c[1] + c[0], c[0]) + conv3(c[0], c[0])
            + (c[0] + 1)
    }

    #[test]
    fn default_parameter_count() {
        assert_eq!(hand_count([32, 64, 128]), 470_977);
        let net = UNet::<f32>::new(UNetSpec::default(), 0).unwrap();
        assert_eq!(net.param_count(), 470_977);
        assert_eq!(UNetSpec::default().param_count(), 470_977);
        assert_eq!(UNetSpec::with_channels([4, 8, 16]).param_count(), hand_count([4, 8, 16]));
        assert_eq!(net.layers()[6].shape.c_in, 192);
        assert_eq!(net.layers()[8].shape.c_in, 96);
    }

    #[test]
    fn seeded_initialization() {
        let spec = UNetSpec::with_channels([4, 8, 16]);
        let a = UNet::<f32>::new(spec.clone(), 3).unwrap();
        let b = UNet::<f32>::new(spec.clone(), 3).unwrap();
        let c = UNet::<f32>::new(spec, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        for l in a.layers() {
            let bound = 1.0 / ((l.shape.c_in * l.shape.kernel * l.shape.kernel) as f32).sqrt();
            let slice = &a.params()[l.weight_offset..l.bias_offset + l.shape.c_out];
            assert!(slice.iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn rejects_bad_specs_and_sizes() {
        let mut spec = UNetSpec::default();
        spec.encoder_channels.push(256);
        assert!(UNet::<f32>::new(spec, 0).is_err());
        let net = UNet::<f32>::new(UNetSpec::with_channels([2, 4, 8]), 0).unwrap();
        let err = net.forward(&ImageBatch::zeros(1, 6, 8)).unwrap_err();
        assert!(err.to_string().contains("pad_to_multiple"));
    }

    #[test]
    fn shape_is_preserved() {
        let net = UNet::<f32>::new(UNetSpec::with_channels([4, 8, 16]), 1).unwrap();
        for (n, h, w) in [(1, 4, 4), (3, 8, 12), (2, 16, 16)] {
            let out = net.forward(&ImageBatch::zeros(n, h, w)).unwrap();
            assert_eq!(out.shape(), [n, 1, h, w]);
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let net = UNet::<f64>::new(UNetSpec::with_channels([3, 5, 7]), 2).unwrap();
        let data: Vec<f64> = (0..4 * 64).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let batch = ImageBatch::new(4, 8, 8, data).unwrap();
        let a = net.forward_with(Exec::Sequential, &batch).unwrap();
        let b = net.forward_with(Exec::Parallel, &batch).unwrap();
        assert_eq!(a, b);
        let (_, caches) = net.forward_train_with(Exec::Parallel, &batch).unwrap();
        let ga = net.backward_with(Exec::Sequential, &caches, &a);
        let gb = net.backward_with(Exec::Parallel, &caches, &a);
        assert_eq!(ga, gb);
    }

    #[test]
    fn denoise_round_trips_odd_sizes_and_tiles() {
        let net = UNet::<f32>::new(UNetSpec::with_channels([2, 4, 8]), 5).unwrap();
        let img = GrayImage::from_fn(130, 127, |(r, c)| ((r + 2 * c) % 50) as f64 / 49.0).unwrap();
        let whole = denoise_image(&net, &img, &DenoiseOptions::default()).unwrap();
        assert_eq!(whole.dim(), (130, 127));
        assert!(whole.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        let tiled_opts = DenoiseOptions { max_whole_pixels: 1000, tile: 64, ..Default::default() };
        let tiled = denoise_image(&net, &img, &tiled_opts).unwrap();
        assert_eq!(tiled.dim(), (130, 127));
        assert!(tiled.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
