//! Composite training objective.
//!
//! * pixel term: mean squared error over blind-spot (masked) sites only;
//! * spectral term: cosine similarity of centered FFT magnitudes between the
//!   full predicted patch and the full clean patch;
//! * channel weighting: `l_px = sum_c w_c * reduce_b mse`, `l_fft = sum_c w_c * reduce_b sim`;
//! * total: `L = l_px / (1 + l_fft)`, so higher spectral agreement lowers the loss.
//!
//! Gradients with respect to the predictions are computed analytically. For
//! the spectral term, with `F = DFT(x)`, `a = |F|` and `g = dS/da`,
//! `dS/dx = Re(DFT(g * conj(F) / |F|))`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Zip};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, fft2_inplace, fftshift};
use crate::par::Exec;
use crate::patch::MaskedPatch;

/// Stabilizer added to the denominator of the spectral cosine similarity.
pub const FFT_EPS: f64 = 1e-8;

/// How per-patch terms are combined within a channel's batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Average over the batch (batch-size invariant).
    #[default]
    Mean,
    /// Literal sum over the batch.
    Sum,
}

impl Reduction {
    fn factor(self, batch: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / batch as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Training channel identifier (1 or 2).
pub type ChannelId = u8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub w1: f64,
    pub w2: f64,
}

impl ChannelWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let w = Self { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    /// Single-channel training on channel 1.
    pub fn only_first() -> Self {
        Self { w1: 1.0, w2: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) || (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "channel weights must be non-negative and sum to 1, got w1={} w2={}",
                self.w1, self.w2
            )));
        }
        Ok(())
    }

    pub fn weight(&self, channel: ChannelId) -> Option<f64> {
        match channel {
            1 => Some(self.w1),
            2 => Some(self.w2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLoss {
    pub mse: f64,
    pub fft_sim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_px: f64,
    /// Absent when the spectral term is disabled.
    pub l_fft: Option<f64>,
    pub total: f64,
    pub per_channel: BTreeMap<ChannelId, ChannelLoss>,
}

fn check_coords(dim: (usize, usize), coords: &[(usize, usize)], values: usize) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::invalid("masked MSE needs at least one masked coordinate"));
    }
    if coords.len() != values {
        return Err(Error::invalid("mask coordinates and target values differ in length"));
    }
    if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= dim.0 || c >= dim.1) {
        return Err(Error::invalid(format!("mask coordinate ({r}, {c}) outside {dim:?}")));
    }
    Ok(())
}

/// Mean of `(pred - target)^2` over the masked coordinates.
pub fn masked_mse(pred: ArrayView2<f64>, target_values: &[f64], mask_coords: &[(usize, usize)]) -> Result<f64> {
    check_coords(pred.dim(), mask_coords, target_values.len())?;
    let sum: f64 = mask_coords
        .iter()
        .zip(target_values)
        .map(|(&rc, t)| (pred[rc] - t).powi(2))
        .sum();
    Ok(sum / mask_coords.len() as f64)
}

/// Masked MSE and its gradient with respect to `pred`.
pub fn masked_mse_with_grad(
    pred: ArrayView2<f64>,
    target_values: &[f64],
    mask_coords: &[(usize, usize)],
) -> Result<(f64, Array2<f64>)> {
    let value = masked_mse(pred, target_values, mask_coords)?;
    let n = mask_coords.len() as f64;
    let mut grad = Array2::zeros(pred.dim());
    for (&rc, t) in mask_coords.iter().zip(target_values) {
        grad[rc] = 2.0 * (pred[rc] - t) / n;
    }
    Ok((value, grad))
}

fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Cosine similarity of the center-shifted FFT magnitude spectra.
pub fn fft_cosine_similarity(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<f64> {
    check_same_shape(pred.dim(), target.dim())?;
    let a = fftshift(&fft2(&pred.to_owned()).mapv(|c| c.norm()));
    let b = fftshift(&fft2(&target.to_owned()).mapv(|c| c.norm()));
    let dot: f64 = Zip::from(&a).and(&b).fold(0.0, |acc, x, y| acc + x * y);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(dot / (na * nb + FFT_EPS))
}

/// Spectral similarity and its gradient with respect to `pred`.
pub fn fft_cosine_similarity_with_grad(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred.dim(), target.dim())?;
    // The center shift permutes both spectra identically, which leaves inner
    // products and norms unchanged, so it is skipped here.
    let fp = fft2(&pred.to_owned());
    let b = fft2(&target.to_owned()).mapv(|c| c.norm());
    let a = fp.mapv(|c| c.norm());
    let dot: f64 = Zip::from(&a).and(&b).fold(0.0, |acc, x, y| acc + x * y);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na * nb + FFT_EPS;
    let value = dot / denom;

    let mut g = Array2::<Complex64>::zeros(fp.dim());
    Zip::from(&mut g)
        .and(&fp)
        .and(&a)
        .and(&b)
        .for_each(|g, f, &ak, &bk| {
            if ak > 0.0 {
                let mut ds_da = bk / denom;
                if na > 0.0 {
                    ds_da -= dot * nb * ak / (na * denom * denom);
                }
                *g = f.conj() * (ds_da / ak);
            }
        });
    fft2_inplace(&mut g);
    Ok((value, g.mapv(|c| c.re)))
}

/// `l_px / (1 + l_fft)`.
pub fn total_loss(l_px: f64, l_fft: f64) -> Result<f64> {
    if !(l_px >= 0.0 && l_fft >= 0.0) {
        return Err(Error::invalid(format!(
            "loss terms must be non-negative, got l_px={l_px} l_fft={l_fft}"
        )));
    }
    Ok(l_px / (1.0 + l_fft))
}

/// One prediction paired with the masked patch it was computed from.
#[derive(Clone, Copy, Debug)]
pub struct PatchPair<'a> {
    pub pred: ArrayView2<'a, f64>,
    pub masked: &'a MaskedPatch,
}

/// Per-channel predictions for one optimizer step.
pub type ChannelBatches<'a> = BTreeMap<ChannelId, Vec<PatchPair<'a>>>;

struct PatchTerms {
    mse: f64,
    mse_grad: Option<Array2<f64>>,
    sim: Option<f64>,
    sim_grad: Option<Array2<f64>>,
}

fn patch_terms(pair: &PatchPair, fft: bool, grads: bool) -> Result<PatchTerms> {
    let m = pair.masked;
    let (mse, mse_grad) = if grads {
        let (v, g) = masked_mse_with_grad(pair.pred, &m.original_values, &m.mask_coords)?;
        (v, Some(g))
    } else {
        (masked_mse(pair.pred, &m.original_values, &m.mask_coords)?, None)
    };
    let (sim, sim_grad) = match (fft, grads) {
        (false, _) => (None, None),
        (true, false) => (Some(fft_cosine_similarity(pair.pred, m.original().view())?), None),
        (true, true) => {
            let (v, g) = fft_cosine_similarity_with_grad(pair.pred, m.original().view())?;
            (Some(v), Some(g))
        }
    };
    Ok(PatchTerms { mse, mse_grad, sim, sim_grad })
}

fn reduced_terms(
    batches: &ChannelBatches,
    weights: &ChannelWeights,
    reduction: Reduction,
    fft: bool,
    grads: bool,
    exec: Exec,
) -> Result<(Vec<(ChannelId, f64, f64, Vec<PatchTerms>)>, f64, f64)> {
    if batches.is_empty() {
        return Err(Error::invalid("at least one channel must contribute patches"));
    }
    let mut out = Vec::new();
    let (mut l_px, mut l_fft) = (0.0, 0.0);
    for (&ch, pairs) in batches {
        let w = weights
            .weight(ch)
            .ok_or_else(|| Error::config(format!("no weight configured for channel {ch}")))?;
        if pairs.is_empty() {
            return Err(Error::invalid(format!("channel {ch} has an empty batch")));
        }
        let terms = exec
            .map_slice(pairs, |p| patch_terms(p, fft, grads))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let r = reduction.factor(pairs.len());
        let mse = r * terms.iter().map(|t| t.mse).sum::<f64>();
        let sim = r * terms.iter().filter_map(|t| t.sim).sum::<f64>();
        l_px += w * mse;
        l_fft += w * sim;
        out.push((ch, mse, sim, terms));
    }
    Ok((out, l_px, l_fft))
}

/// Weighted `(l_px, l_fft)` over every channel's batch.
pub fn channel_losses(
    batches: &ChannelBatches,
    weights: &ChannelWeights,
    reduction: Reduction,
) -> Result<(f64, f64)> {
    let (_, l_px, l_fft) = reduced_terms(batches, weights, reduction, true, false, Exec::Sequential)?;
    Ok((l_px, l_fft))
}

/// Full objective for one step. Returns the breakdown and, for every
/// channel (in ascending id order) and patch, `dL/dpred`.
pub fn composite_loss_with_grad(
    batches: &ChannelBatches,
    weights: &ChannelWeights,
    reduction: Reduction,
    fft_enabled: bool,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<(ChannelId, Vec<Array2<f64>>)>)> {
    let (terms, l_px, l_fft) = reduced_terms(batches, weights, reduction, fft_enabled, true, exec)?;
    let (total, d_px, d_fft) = if fft_enabled {
        let total = total_loss(l_px, l_fft)?;
        (total, 1.0 / (1.0 + l_fft), -l_px / (1.0 + l_fft).powi(2))
    } else {
        (l_px, 1.0, 0.0)
    };

    let mut per_channel = BTreeMap::new();
    let mut grads = Vec::new();
    for (ch, mse, sim, patch_terms) in terms {
        per_channel.insert(ch, ChannelLoss { mse, fft_sim: fft_enabled.then_some(sim) });
        let scale = weights.weight(ch).unwrap_or(0.0) * reduction.factor(patch_terms.len());
        let g = patch_terms
            .into_iter()
            .map(|t| {
                let mut g = t.mse_grad.expect("gradients requested") * (scale * d_px);
                if let Some(sg) = t.sim_grad {
                    g.scaled_add(scale * d_fft, &sg);
                }
                g
            })
            .collect();
        grads.push((ch, g));
    }
    Ok((
        LossBreakdown {
            l_px,
            l_fft: fft_enabled.then_some(l_fft),
            total,
            per_channel,
        },
        grads,
    ))
}
