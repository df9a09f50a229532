//! Whole-network backward pass against central finite differences.
//!
//! The network is piecewise linear in each parameter, so a small enough step
//! avoids ReLU and max-pool switching and the check can demand agreement on
//! every sampled parameter.

use gdm_core::nn::{ImageBatch, UNet, UNetSpec};
use gdm_core::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weighted_sum(net: &UNet<f64>, x: &ImageBatch<f64>, r: &[f64]) -> f64 {
    let y = net.forward_with(Exec::Sequential, x).unwrap();
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn agreeing_params(spec: UNetSpec, seed: u64, (n, h, w): (usize, usize, usize), step: f64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = UNet::<f64>::new(spec, seed).unwrap();
    let x = ImageBatch::new(n, h, w, (0..n * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let r: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, caches) = net.forward_train_with(Exec::Sequential, &x).unwrap();
    let grad = net.backward_with(Exec::Sequential, &caches, &ImageBatch::new(n, h, w, r.clone()).unwrap());
    let mut good = 0;
    for _ in 0..200 {
        let i = rng.gen_range(0..net.param_count());
        let orig = net.params()[i];
        net.params_mut()[i] = orig + step;
        let up = weighted_sum(&net, &x, &r);
        net.params_mut()[i] = orig - step;
        let down = weighted_sum(&net, &x, &r);
        net.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        if rel <= 1e-2 {
            good += 1;
        }
    }
    good
}

#[test]
fn small_network_non_square_batch() {
    let spec = UNetSpec::with_channels([3, 4, 5]);
    for seed in 0..3 {
        assert_eq!(agreeing_params(spec.clone(), seed, (2, 8, 12), 1e-6), 200, "seed {seed}");
    }
}

#[test]
fn default_network() {
    assert_eq!(agreeing_params(UNetSpec::default(), 1, (1, 16, 12), 1e-6), 200);
}
