use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Parser;
use gdm_core::loss::{ChannelWeights, Reduction};
use gdm_core::metrics::{evaluate_images, EvalSettings, ImageMetrics, Modality, MetricsReport};
use gdm_core::nn::{checkpoint_paths, denoise_image, load_checkpoint, save_checkpoint, DenoiseOptions, UNetSpec};
use gdm_core::preprocess::{afm_notch_clean, mask_image, sem_clean, stm_bandpass_enhance};
use gdm_core::synth::{
    add_artifact, add_bright_strips, simulate_lattice, simulate_qpi, ArtifactKind, ArtifactSpec, LatticeParams,
    QpiParams,
};
use gdm_core::trainer::{loss_history_csv, train_with, ChannelSpec, TrainOptions};
use gdm_core::{load_image, save_image, Exec, GrayImage};
use serde::Serialize;

use crate::config::GdmConfig;
use crate::manifest::{sibling, with_suffix, RunManifest, Staging};
use crate::overlay::{lines_overlay, save_rgb, spectrum_overlay};
use crate::*;

pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let cfg = GdmConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Preprocess(a) => preprocess(a, &cfg, args),
        Command::Train(a) => train(a, &cfg, exec, args, cli.config.is_some()),
        Command::Denoise(a) => denoise(a, exec, args),
        Command::Evaluate(a) => evaluate(a, exec, args),
        Command::Synth(s) => synth(s, args),
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn replay(path: &Path) -> Result<()> {
    let m = RunManifest::load(path)?;
    if m.args.first().map(String::as_str) == Some("replay") {
        bail!("refusing to replay a replay");
    }
    let argv: Vec<String> = std::iter::once("gdm".to_string()).chain(m.args.iter().cloned()).collect();
    let cli = Cli::try_parse_from(&argv).context("manifest arguments no longer parse")?;
    run(cli, &m.args)
}

fn finish(mut staging: Staging, mut manifest: RunManifest, manifest_path: PathBuf) -> Result<()> {
    manifest.outputs = staging.targets();
    manifest.outputs.push(manifest_path.clone());
    staging.write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    for p in staging.commit()? {
        println!("{}", p.display());
    }
    Ok(())
}

fn load(path: &Path) -> Result<GrayImage> {
    load_image(path).with_context(|| format!("loading {}", path.display()))
}

fn save(staging: &mut Staging, img: &GrayImage, target: &Path) -> Result<()> {
    let tmp = staging.path(target)?;
    save_image(img, &tmp).with_context(|| format!("writing {}", target.display()))
}

fn preprocess(a: PreprocessArgs, cfg: &GdmConfig, args: &[String]) -> Result<()> {
    let img = load(&a.input)?;
    let out = |suffix: &str| sibling(&a.input, a.out_dir.as_deref(), suffix);
    let mut manifest = RunManifest::new("preprocess", args);
    manifest.inputs.push(a.input.clone());
    let mut staging = Staging::new();
    match a.mode {
        Mode::Stm => {
            let mut p = cfg.stm;
            p.r_low = a.r_low.unwrap_or(p.r_low);
            p.r_high = a.r_high.unwrap_or(p.r_high);
            p.theta_margin_deg = a.theta_margin.unwrap_or(p.theta_margin_deg);
            let res = manifest.time("bandpass", || stm_bandpass_enhance(&img, &p))?;
            save(&mut staging, &res.image, &out("bandpass.png"))?;
            manifest.config = serde_json::json!({ "mode": "stm", "stm": p, "mask": res.mask.description });
        }
        Mode::Afm => {
            let mut p = cfg.afm;
            p.dc_radius = a.dc_radius.unwrap_or(p.dc_radius);
            p.smooth_sigma = a.smooth_sigma.unwrap_or(p.smooth_sigma);
            p.notch_half_width = a.notch_half_width.unwrap_or(p.notch_half_width);
            p.dark_percentile = a.dark_percentile.unwrap_or(p.dark_percentile);
            p.mad_factor = a.mad_factor.unwrap_or(p.mad_factor);
            p.axis = a.axis.unwrap_or(p.axis);
            let res = manifest.time("notch", || afm_notch_clean(&img, &p))?;
            save(&mut staging, &res.cleaned, &out("cleaned.png"))?;
            save(&mut staging, &res.pair.dark_masked, &out("darkmask.png"))?;
            save(&mut staging, &res.pair.merged, &out("merged.png"))?;
            manifest.config = serde_json::json!({
                "mode": "afm",
                "afm": p,
                "notch_lines": res.notch_lines,
                "dark_threshold": res.dark_threshold,
            });
        }
        Mode::Sem => {
            let mut p = cfg.sem;
            p.threshold = a.threshold.unwrap_or(p.threshold);
            p.radius = a.radius.unwrap_or(p.radius);
            let res = manifest.time("inpaint", || sem_clean(&img, &p))?;
            save(&mut staging, &mask_image(&res.mask)?, &out("stripmask.png"))?;
            save(&mut staging, &res.cleaned, &out("cleaned.png"))?;
            let masked = res.mask.iter().filter(|&&m| m).count();
            manifest.config = serde_json::json!({ "mode": "sem", "sem": p, "masked_pixels": masked });
        }
    }
    let mode = format!("{:?}", a.mode).to_lowercase();
    finish(staging, manifest, out(&format!("{mode}.manifest.json")))
}

fn resolve_weights(a: &TrainArgs, cfg: &GdmConfig, from_file: bool) -> Result<ChannelWeights> {
    let w = match (a.w1, a.w2) {
        (Some(w1), Some(w2)) => ChannelWeights::new(w1, w2),
        (Some(w1), None) => ChannelWeights::new(w1, 1.0 - w1),
        (None, Some(w2)) => ChannelWeights::new(1.0 - w2, w2),
        (None, None) if from_file => Ok(cfg.train.weights),
        (None, None) => match (a.ch1.is_some(), a.ch2.is_some()) {
            (true, true) => ChannelWeights::new(0.5, 0.5),
            (false, true) => ChannelWeights::new(0.0, 1.0),
            _ => Ok(ChannelWeights::only_first()),
        },
    }?;
    Ok(w)
}

fn train(a: TrainArgs, cfg: &GdmConfig, exec: Exec, args: &[String], from_file: bool) -> Result<()> {
    let mut tc = cfg.train.clone();
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.patch_size = a.patch_size.unwrap_or(tc.patch_size);
    tc.stride = a.stride.or(tc.stride);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.learning_rate = a.lr.unwrap_or(tc.learning_rate);
    tc.mask_fraction = a.mask_fraction.unwrap_or(tc.mask_fraction);
    tc.seed = a.seed.unwrap_or(tc.seed);
    if let Some(r) = a.reduction {
        tc.reduction = match r {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Sum => Reduction::Sum,
        };
    }
    if a.no_fft {
        tc.fft_loss_enabled = false;
    }
    tc.weights = resolve_weights(&a, cfg, from_file)?;
    tc.validate()?;
    let spec = match &a.channels {
        Some(c) => match c[..] {
            [a, b, d] => UNetSpec::with_channels([a, b, d]),
            _ => bail!("--channels takes exactly three widths, got {}", c.len()),
        },
        None => cfg.model.clone(),
    };
    spec.validate()?;

    let mut manifest = RunManifest::new("train", args);
    let mut channels = Vec::new();
    for (id, path, w) in [(1u8, &a.ch1, tc.weights.w1), (2u8, &a.ch2, tc.weights.w2)] {
        match path {
            Some(p) => {
                manifest.inputs.push(p.clone());
                channels.push(ChannelSpec::new(id, load(p)?, w));
            }
            None if w > 0.0 => bail!("channel {id} has weight {w} but no image was given"),
            None => {}
        }
    }
    manifest.seeds.insert("train".into(), tc.seed);
    manifest.config = serde_json::json!({ "train": tc, "model": spec, "adam": cfg.adam });

    let options = TrainOptions { spec, adam: cfg.adam, exec };
    let quiet = a.quiet;
    let outcome = manifest.time("train", || {
        let mut last_epoch = usize::MAX;
        train_with(&channels, &tc, &options, |s| {
            if !quiet && s.epoch != last_epoch {
                last_epoch = s.epoch;
                eprintln!("epoch {:>3}  L {:.6}  lr {:.2e}", s.epoch, s.total, s.lr);
            }
        })
    })?;

    let mut staging = Staging::new();
    let (weights_target, meta_target) = checkpoint_paths(&a.out);
    let (tmp_weights, tmp_meta) = checkpoint_paths(staging.temp_base(&a.out)?);
    staging.adopt(tmp_weights.clone(), weights_target);
    staging.adopt(tmp_meta, meta_target);
    save_checkpoint(&outcome.model, &outcome.metadata, &tmp_weights)?;
    staging.write(with_suffix(&a.out, "loss.csv"), loss_history_csv(&outcome.history))?;
    finish(staging, manifest, with_suffix(&a.out, "manifest.json"))
}

fn denoise(a: DenoiseArgs, exec: Exec, args: &[String]) -> Result<()> {
    let (model, meta) = load_checkpoint::<f32>(&a.ckpt)?;
    let img = load(&a.input)?;
    let mut manifest = RunManifest::new("denoise", args);
    manifest.inputs = vec![a.input.clone(), checkpoint_paths(&a.ckpt).0];
    if let Some(seed) = meta.seed {
        manifest.seeds.insert("checkpoint".into(), seed);
    }
    let opts = DenoiseOptions { max_whole_pixels: a.max_whole_pixels, tile: a.tile, overlap: a.overlap, exec };
    manifest.config = serde_json::json!({ "tile": a.tile, "overlap": a.overlap, "max_whole_pixels": a.max_whole_pixels, "model": meta.spec });
    let out = manifest.time("denoise", || denoise_image(&model, &img, &opts))?;
    let mut staging = Staging::new();
    save(&mut staging, &out, &a.out)?;
    finish(staging, manifest, sibling(&a.out, None, "manifest.json"))
}

#[derive(Serialize)]
struct CsvRow<'a> {
    noisy: &'a str,
    denoised: &'a str,
    modality: &'a str,
    theta1: f64,
    theta2: f64,
    pnr_noisy_db: f64,
    pnr_denoised_db: f64,
    delta_pnr_db: f64,
    line_length_noisy: f64,
    line_length_denoised: f64,
    delta_line_length: f64,
    peaks_noisy: usize,
    peaks_denoised: usize,
    segments_noisy: usize,
    segments_denoised: usize,
}

fn evaluate(a: EvaluateArgs, exec: Exec, args: &[String]) -> Result<()> {
    if a.noisy.len() != a.denoised.len() {
        bail!("{} noisy images but {} denoised images", a.noisy.len(), a.denoised.len());
    }
    let modality = match a.modality {
        ModalityArg::Stm => Modality::Stm,
        ModalityArg::Afm => Modality::Afm,
        ModalityArg::Sem => Modality::Sem,
    };
    let mut settings = EvalSettings::for_modality(modality);
    if let Some(t) = &a.theta {
        settings.theta = (t[0], t[1]);
    }
    settings.pnr.min_distance = a.min_distance.unwrap_or(settings.pnr.min_distance);
    settings.pnr.threshold_rel = a.threshold_rel.unwrap_or(settings.pnr.threshold_rel);
    settings.lines.seed = a.seed.unwrap_or(settings.lines.seed);

    let mut manifest = RunManifest::new("evaluate", args);
    manifest.seeds.insert("hough".into(), settings.lines.seed);
    manifest.config = serde_json::to_value(&settings)?;
    let mut images = Vec::new();
    for (n, d) in a.noisy.iter().zip(&a.denoised) {
        let (ni, di) = (load(n)?, load(d)?);
        if ni.dim() != di.dim() {
            bail!("{} is {:?} but {} is {:?}", n.display(), ni.dim(), d.display(), di.dim());
        }
        manifest.inputs.extend([n.clone(), d.clone()]);
        images.extend([ni, di]);
    }
    let evals = manifest.time("evaluate", || evaluate_images(&images, &settings, exec))?;

    let mut staging = Staging::new();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut reports = Vec::new();
    for (i, (n, d)) in a.noisy.iter().zip(&a.denoised).enumerate() {
        let (en, ed) = (&evals[2 * i], &evals[2 * i + 1]);
        let rep = MetricsReport::from_evaluations(settings.clone(), en, ed);
        let (ns, ds) = (n.display().to_string(), d.display().to_string());
        writer.serialize(CsvRow {
            noisy: &ns,
            denoised: &ds,
            modality: &format!("{modality:?}").to_lowercase(),
            theta1: settings.theta.0,
            theta2: settings.theta.1,
            pnr_noisy_db: rep.noisy.pnr_db,
            pnr_denoised_db: rep.denoised.pnr_db,
            delta_pnr_db: rep.delta_pnr_db,
            line_length_noisy: rep.noisy.line_length,
            line_length_denoised: rep.denoised.line_length,
            delta_line_length: rep.delta_line_length,
            peaks_noisy: rep.noisy.n_peaks,
            peaks_denoised: rep.denoised.n_peaks,
            segments_noisy: rep.noisy.n_segments,
            segments_denoised: rep.denoised.n_segments,
        })?;
        if let Some(dir) = &a.plots {
            for (path, img, e) in [(n, &images[2 * i], en), (d, &images[2 * i + 1], ed)] {
                let spec_path = staging.path(sibling(path, Some(dir), "spectrum.png"))?;
                save_rgb(&spectrum_overlay(e), &spec_path)?;
                let lines_path = staging.path(sibling(path, Some(dir), "lines.png"))?;
                save_rgb(&lines_overlay(img, e, settings.theta), &lines_path)?;
            }
        }
        println!(
            "{}: PNR {:.3} -> {:.3} dB, line length {:.2} -> {:.2}",
            d.display(),
            rep.noisy.pnr_db,
            rep.denoised.pnr_db,
            rep.noisy.line_length,
            rep.denoised.line_length
        );
        reports.push(rep);
    }
    staging.write(&a.csv, writer.into_inner().context("finishing CSV")?)?;
    let metrics: Vec<(&ImageMetrics, &ImageMetrics)> = reports.iter().map(|r| (&r.noisy, &r.denoised)).collect();
    manifest.config["pairs"] = serde_json::to_value(metrics)?;
    finish(staging, manifest, sibling(&a.csv, None, "manifest.json"))
}

#[derive(Serialize)]
struct Sidecar<T: Serialize> {
    generator: &'static str,
    params: T,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    artifacts: Vec<ArtifactSpec>,
}

fn synth(cmd: SynthCommand, args: &[String]) -> Result<()> {
    let mut manifest = RunManifest::new("synth", args);
    let mut staging = Staging::new();
    let out = match cmd {
        SynthCommand::Qpi(a) => {
            let params = QpiParams {
                effective_mass_ratio: a.mass_ratio,
                chemical_potential_ev: a.mu,
                image_size_px: a.size,
                field_of_view_nm: a.fov_nm,
                n_scatterers: a.scatterers,
                decay_exponent: a.decay,
                seed: a.seed,
                ..Default::default()
            };
            let clean = manifest.time("qpi", || simulate_qpi(&params))?;
            save(&mut staging, &clean, &a.out)?;
            manifest.seeds.insert("qpi".into(), a.seed);
            let mut artifacts = Vec::new();
            if let Some(amp) = a.scanlines {
                let spec = ArtifactSpec::scanlines(amp, a.artifact_seed);
                let noisy = add_artifact(&clean, &spec)?;
                save(&mut staging, &noisy, &sibling(&a.out, None, "noisy.png"))?;
                manifest.seeds.insert("scanlines".into(), a.artifact_seed);
                artifacts.push(spec);
            }
            let sidecar = Sidecar { generator: "qpi", params: &params, artifacts };
            staging.write(sibling(&a.out, None, "json"), serde_json::to_vec_pretty(&sidecar)?)?;
            manifest.config = serde_json::to_value(&sidecar)?;
            a.out
        }
        SynthCommand::Lattice(a) => {
            let params = LatticeParams { image_size_px: a.size, period_px: a.period, angle_deg: a.angle, seed: a.seed };
            let img = simulate_lattice(&params)?;
            save(&mut staging, &img, &a.out)?;
            manifest.seeds.insert("lattice".into(), a.seed);
            let sidecar = Sidecar { generator: "lattice", params: &params, artifacts: Vec::new() };
            staging.write(sibling(&a.out, None, "json"), serde_json::to_vec_pretty(&sidecar)?)?;
            manifest.config = serde_json::to_value(&sidecar)?;
            a.out
        }
        SynthCommand::Artifact(a) => {
            let img = load(&a.input)?;
            manifest.inputs.push(a.input.clone());
            let mut spec = match a.kind {
                ArtifactKindArg::Scanlines => ArtifactSpec::scanlines(a.amplitude, a.seed),
                ArtifactKindArg::BrightStrips => ArtifactSpec::bright_strips(a.amplitude, 6, a.seed),
                ArtifactKindArg::GaussianNoise => ArtifactSpec::gaussian_noise(a.sigma, a.seed),
            };
            spec.density = a.density.unwrap_or(spec.density);
            spec.angle_jitter_deg = a.jitter;
            let out_img = if spec.kind == ArtifactKind::BrightStrips {
                let (img2, painted) = add_bright_strips(&img, &spec)?;
                save(&mut staging, &mask_image(&painted)?, &sibling(&a.out, None, "painted.png"))?;
                img2
            } else {
                add_artifact(&img, &spec)?
            };
            save(&mut staging, &out_img, &a.out)?;
            manifest.seeds.insert("artifact".into(), a.seed);
            let sidecar = Sidecar { generator: "artifact", params: serde_json::json!({ "input": a.input }), artifacts: vec![spec] };
            staging.write(sibling(&a.out, None, "json"), serde_json::to_vec_pretty(&sidecar)?)?;
            manifest.config = serde_json::to_value(&sidecar)?;
            a.out
        }
    };
    finish(staging, manifest, sibling(&out, None, "manifest.json"))
}
