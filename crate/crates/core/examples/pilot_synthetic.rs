//! Trains the full and pixel-only models on the synthetic scan-line fixture
//! and prints the metrics the end-to-end checks are calibrated against.

use std::time::Instant;

use gdm_core::loss::ChannelWeights;
use gdm_core::metrics::{evaluate_image, pnr_score, EvalSettings, Modality, PnrParams};
use gdm_core::nn::{denoise_image, DenoiseOptions};
use gdm_core::synth::{qpi_scanline_pair, QpiParams};
use gdm_core::trainer::{ablate_fft, train_with, ChannelSpec, TrainConfig, TrainOptions};

fn high_band_energy(img: &gdm_core::GrayImage) -> f64 {
    let r = pnr_score(img, &PnrParams::default()).unwrap();
    r.p_noise
}

fn main() -> gdm_core::Result<()> {
    let qpi = QpiParams { seed: 1, ..Default::default() };
    let (clean, noisy) = qpi_scanline_pair(&qpi, 0.2, 2)?;
    let config = TrainConfig {
        weights: ChannelWeights::new(0.01, 0.99)?,
        seed: 0,
        ..Default::default()
    };
    let channels = [ChannelSpec::new(1, noisy.clone(), 0.01), ChannelSpec::new(2, clean.clone(), 0.99)];
    let settings = EvalSettings::for_modality(Modality::Stm);
    let n = evaluate_image(&noisy, &settings)?;
    let c = evaluate_image(&clean, &settings)?;
    println!("clean: pnr {:.3} length {:.2}", c.pnr.pnr_db, c.line_length);
    println!("noisy: pnr {:.3} length {:.2} high-band {:.4e}", n.pnr.pnr_db, n.line_length, high_band_energy(&noisy));
    for (name, cfg) in [("fft", config.clone()), ("pixel-only", ablate_fft(&config))] {
        let t = Instant::now();
        let out = train_with(&channels, &cfg, &TrainOptions::default(), |_| {})?;
        let den = denoise_image(&out.model, &noisy, &DenoiseOptions::default())?;
        let e = evaluate_image(&den, &settings)?;
        println!(
            "{name}: {:.0}s pnr {:.3} (delta {:+.3}) length {:.2} (ratio {:.3}) high-band {:.4e}",
            t.elapsed().as_secs_f64(),
            e.pnr.pnr_db,
            e.pnr.pnr_db - n.pnr.pnr_db,
            e.line_length,
            e.line_length / n.line_length,
            high_band_energy(&den)
        );
        let losses: Vec<String> = out.history.iter().map(|h| format!("{:.4}", h.total)).collect();
        println!("{name} losses: {}", losses.join(" "));
    }
    Ok(())
}
