//! Two-channel self-supervised training loop.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::loss::{composite_loss_with_grad, ChannelBatches, ChannelId, ChannelWeights, PatchPair, Reduction};
use crate::nn::{Adam, AdamConfig, CheckpointMetadata, ImageBatch, UNet, UNetSpec};
use crate::par::Exec;
use crate::patch::{apply_blindspot_mask, extract_patches, mask_count, MaskedPatch, Patch};

/// Global training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    /// Patch extraction stride; `None` means non-overlapping (`patch_size`).
    pub stride: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_fraction: f64,
    pub epochs: usize,
    pub weights: ChannelWeights,
    pub reduction: Reduction,
    pub fft_loss_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            stride: None,
            batch_size: 8,
            learning_rate: 1e-4,
            mask_fraction: 0.1,
            epochs: 50,
            weights: ChannelWeights::only_first(),
            reduction: Reduction::Mean,
            fft_loss_enabled: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return Err(Error::config(format!(
                "patch_size must be a positive multiple of 4, got {}",
                self.patch_size
            )));
        }
        if self.stride == Some(0) {
            return Err(Error::config("stride must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::config(format!(
                "mask_fraction must lie in (0, 1), got {}",
                self.mask_fraction
            )));
        }
        if mask_count(self.patch_size, self.mask_fraction) == 0 {
            return Err(Error::config("mask_fraction masks no pixel at this patch size"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.weights.validate()
    }
}

/// Returns `config` with the spectral loss term switched off.
pub fn ablate_fft(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        fft_loss_enabled: false,
        ..config.clone()
    }
}

/// Step-decayed learning rate: halved every 10 epochs.
pub fn lr_at_epoch(base_lr: f64, epoch: usize) -> f64 {
    base_lr * 0.5f64.powi((epoch / 10) as i32)
}

/// One training input.
#[derive(Clone, Debug)]
pub struct ChannelSpec {
    pub channel_id: ChannelId,
    pub image: GrayImage,
    pub weight: f64,
}

impl ChannelSpec {
    pub fn new(channel_id: ChannelId, image: GrayImage, weight: f64) -> Self {
        Self { channel_id, image, weight }
    }
}

/// Losses of a single optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub l_px: f64,
    pub l_fft: Option<f64>,
    pub total: f64,
    pub lr: f64,
}

/// Mean losses over the steps of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_px: f64,
    pub l_fft: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub steps: usize,
}

/// CSV rendering of a loss history: `epoch,l_px,l_fft,L,lr`. The `l_fft`
/// field is left empty when the spectral term was disabled.
pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_px,l_fft,L,lr\n");
    for r in history {
        let fft = r.l_fft.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.l_px, fft, r.total, r.lr);
    }
    out
}

/// Knobs that do not belong to the persisted hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub spec: UNetSpec,
    pub adam: AdamConfig,
    pub exec: Exec,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNet<f32>,
    pub metadata: CheckpointMetadata,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

struct ChannelState {
    id: ChannelId,
    patches: Vec<Patch>,
    rng: ChaCha8Rng,
}

fn prepare_channels(channels: &[ChannelSpec], config: &TrainConfig) -> Result<Vec<ChannelState>> {
    if channels.is_empty() {
        return Err(Error::config("at least one training channel is required"));
    }
    let mut seen = Vec::new();
    let mut states = Vec::new();
    for ch in channels {
        let expected = config
            .weights
            .weight(ch.channel_id)
            .ok_or_else(|| Error::config(format!("channel id {} is not 1 or 2", ch.channel_id)))?;
        if seen.contains(&ch.channel_id) {
            return Err(Error::config(format!("channel {} given twice", ch.channel_id)));
        }
        seen.push(ch.channel_id);
        if (ch.weight - expected).abs() > 1e-9 {
            return Err(Error::config(format!(
                "channel {} weight {} disagrees with configured weight {expected}",
                ch.channel_id, ch.weight
            )));
        }
        let (h, w) = ch.image.dim();
        if h < config.patch_size || w < config.patch_size {
            return Err(Error::config(format!(
                "channel {} image is {h}x{w}, smaller than patch size {}",
                ch.channel_id, config.patch_size
            )));
        }
        // A zero-weight channel cannot influence the objective, so it is not
        // sampled at all.
        if expected == 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::from(ch.channel_id));
        states.push(ChannelState {
            id: ch.channel_id,
            patches: extract_patches(&ch.image, config.patch_size, config.effective_stride())?,
            rng,
        });
    }
    for id in [1, 2] {
        if config.weights.weight(id).unwrap_or(0.0) > 0.0 && !seen.contains(&id) {
            return Err(Error::config(format!("channel {id} has positive weight but no image")));
        }
    }
    states.sort_by_key(|s| s.id);
    Ok(states)
}

/// Number of optimizer steps per epoch for the given per-channel patch counts.
pub fn steps_per_epoch(patch_counts: &[usize], batch_size: usize) -> usize {
    patch_counts.iter().copied().max().unwrap_or(0).div_ceil(batch_size)
}

pub fn train(channels: &[ChannelSpec], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(channels, config, &TrainOptions::default(), |_| {})
}

/// Runs the full training schedule. `on_step` observes every optimizer step.
pub fn train_with(
    channels: &[ChannelSpec],
    config: &TrainConfig,
    options: &TrainOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut states = prepare_channels(channels, config)?;
    let mut model = UNet::<f32>::new(options.spec.clone(), config.seed)?;
    let mut adam = Adam::new(options.adam, model.param_count());
    let counts: Vec<usize> = states.iter().map(|s| s.patches.len()).collect();
    let n_steps = steps_per_epoch(&counts, config.batch_size);
    let n_max = counts.iter().copied().max().unwrap_or(0);
    let s = config.patch_size;

    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(config.epochs * n_steps);
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config.learning_rate, epoch);
        let orders: Vec<Vec<usize>> = states
            .iter_mut()
            .map(|st| {
                let mut order: Vec<usize> = (0..st.patches.len()).collect();
                order.shuffle(&mut st.rng);
                order
            })
            .collect();

        let mut epoch_steps = Vec::with_capacity(n_steps);
        for step in 0..n_steps {
            let start = step * config.batch_size;
            let len = config.batch_size.min(n_max - start);

            let mut masked: Vec<(ChannelId, Vec<MaskedPatch>)> = Vec::with_capacity(states.len());
            for (st, order) in states.iter_mut().zip(&orders) {
                let n = st.patches.len();
                let take = len.min(n);
                let batch = (0..take)
                    .map(|j| apply_blindspot_mask(&st.patches[order[(start + j) % n]], config.mask_fraction, &mut st.rng))
                    .collect::<Result<Vec<_>>>()?;
                masked.push((st.id, batch));
            }

            let input = ImageBatch::<f32>::from_arrays(masked.iter().flat_map(|(_, b)| b.iter().map(|m| &m.corrupted)))?;
            let (output, caches) = model.forward_train_with(options.exec, &input)?;
            let preds: Vec<Array2<f64>> = (0..output.n).map(|i| output.sample_array(i)).collect();

            let mut batches = ChannelBatches::new();
            let mut k = 0;
            for (id, group) in &masked {
                let pairs = group
                    .iter()
                    .map(|m| {
                        let p = PatchPair { pred: preds[k].view(), masked: m };
                        k += 1;
                        p
                    })
                    .collect();
                batches.insert(*id, pairs);
            }
            let (breakdown, grads) = composite_loss_with_grad(
                &batches,
                &config.weights,
                config.reduction,
                config.fft_loss_enabled,
                options.exec,
            )
            .map_err(|e| Error::NonFiniteLoss { epoch, batch: step, reason: e.to_string() })?;
            if !breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: step,
                    reason: format!("loss evaluated to {}", breakdown.total),
                });
            }

            let mut grad_data = Vec::with_capacity(output.data.len());
            for (_, gs) in &grads {
                for g in gs {
                    grad_data.extend(g.iter().map(|&v| v as f32));
                }
            }
            let grad_out = ImageBatch::new(output.n, s, s, grad_data)?;
            let param_grads = model.backward_with(options.exec, &caches, &grad_out);
            if param_grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: step,
                    reason: "non-finite parameter gradient".into(),
                });
            }
            adam.step(model.params_mut(), &param_grads, lr);

            let record = StepRecord {
                epoch,
                batch: step,
                l_px: breakdown.l_px,
                l_fft: breakdown.l_fft,
                total: breakdown.total,
                lr,
            };
            on_step(&record);
            epoch_steps.push(record);
        }

        let n = epoch_steps.len() as f64;
        history.push(EpochRecord {
            epoch,
            l_px: epoch_steps.iter().map(|r| r.l_px).sum::<f64>() / n,
            l_fft: config
                .fft_loss_enabled
                .then(|| epoch_steps.iter().filter_map(|r| r.l_fft).sum::<f64>() / n),
            total: epoch_steps.iter().map(|r| r.total).sum::<f64>() / n,
            lr,
            steps: epoch_steps.len(),
        });
        steps.extend(epoch_steps);
    }

    let mut metadata = CheckpointMetadata::for_model(&model);
    metadata.epoch = config.epochs;
    metadata.seed = Some(config.seed);
    metadata.train_config = Some(config.clone());
    metadata.adam = Some(adam.config());
    metadata.loss_history = history.clone();
    Ok(TrainOutcome { model, metadata, history, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_options() -> TrainOptions {
        TrainOptions {
            spec: UNetSpec::with_channels([2, 4, 4]),
            ..Default::default()
        }
    }

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |(r, c)| ((r * 7 + c * 3) % 17) as f64 / 16.0).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            patch_size: 8,
            batch_size: 2,
            epochs: 2,
            mask_fraction: 0.1,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at_epoch(1e-4, 0), 1e-4);
        assert_eq!(lr_at_epoch(1e-4, 9), 1e-4);
        assert_eq!(lr_at_epoch(1e-4, 10), 5e-5);
        assert_eq!(lr_at_epoch(1e-3, 25), 2.5e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { patch_size: 6, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { mask_fraction: 1.0, ..Default::default() },
            TrainConfig { mask_fraction: 0.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { stride: Some(0), ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        let ablated = ablate_fft(&TrainConfig::default());
        assert!(!ablated.fft_loss_enabled);
        assert_eq!(TrainConfig { fft_loss_enabled: true, ..ablated }, TrainConfig::default());
    }

    #[test]
    fn config_json_accepts_partial_documents() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "reduction": "sum"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.reduction, Reduction::Sum);
        assert_eq!(c.patch_size, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn step_counting() {
        assert_eq!(steps_per_epoch(&[16], 8), 2);
        assert_eq!(steps_per_epoch(&[16, 4], 8), 2);
        assert_eq!(steps_per_epoch(&[17], 8), 3);
    }

    #[test]
    fn small_image_is_a_config_error() {
        let ch = [ChannelSpec::new(1, ramp(6, 20), 1.0)];
        assert!(matches!(train_with(&ch, &small_config(), &tiny_options(), |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn weight_mismatch_and_missing_channel_are_config_errors() {
        let ch = [ChannelSpec::new(1, ramp(16, 16), 0.5)];
        assert!(matches!(train_with(&ch, &small_config(), &tiny_options(), |_| {}), Err(Error::Config(_))));
        let config = TrainConfig { weights: ChannelWeights::new(0.5, 0.5).unwrap(), ..small_config() };
        let ch = [ChannelSpec::new(1, ramp(16, 16), 0.5)];
        assert!(matches!(train_with(&ch, &config, &tiny_options(), |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn history_and_lr_are_logged_per_step() {
        let config = TrainConfig { epochs: 12, learning_rate: 1e-3, ..small_config() };
        let ch = [ChannelSpec::new(1, ramp(16, 16), 1.0)];
        let out = train_with(&ch, &config, &tiny_options(), |_| {}).unwrap();
        assert_eq!(out.history.len(), 12);
        assert_eq!(out.steps.len(), 12 * 2);
        for s in &out.steps {
            assert_eq!(s.lr, lr_at_epoch(1e-3, s.epoch));
            assert!((s.total - s.l_px / (1.0 + s.l_fft.unwrap())).abs() < 1e-15);
        }
        assert_eq!(out.metadata.loss_history, out.history);
        let csv = loss_history_csv(&out.history);
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("epoch,l_px,l_fft,L,lr\n"));
    }

    #[test]
    fn ablation_logs_no_spectral_term() {
        let config = ablate_fft(&small_config());
        let ch = [ChannelSpec::new(1, ramp(16, 16), 1.0)];
        let out = train_with(&ch, &config, &tiny_options(), |_| {}).unwrap();
        assert!(out.steps.iter().all(|s| s.l_fft.is_none() && s.total == s.l_px));
        assert!(out.history.iter().all(|r| r.l_fft.is_none()));
        let csv = loss_history_csv(&out.history);
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("")));
    }

    #[test]
    fn sequential_and_parallel_runs_agree() {
        let ch = [ChannelSpec::new(1, ramp(16, 24), 1.0)];
        let seq = TrainOptions { exec: Exec::Sequential, ..tiny_options() };
        let par = TrainOptions { exec: Exec::Parallel, ..tiny_options() };
        let a = train_with(&ch, &small_config(), &seq, |_| {}).unwrap();
        let b = train_with(&ch, &small_config(), &par, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }
}
