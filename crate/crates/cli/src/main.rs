//! `gdm`: preprocess, train, denoise, evaluate and synthesize microscopy images.

mod commands;
mod config;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "gdm", version, about = "Self-supervised denoising for STM, AFM and SEM images")]
pub struct Cli {
    /// JSON config file (schema_version 1); command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Size of the worker pool [default: number of cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Prepare training images (STM band-pass, AFM notch + dark mask, SEM strip removal).
    Preprocess(PreprocessArgs),
    /// Train a denoiser on one or two channel images.
    Train(TrainArgs),
    /// Denoise an image with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score noisy/denoised pairs: spectral PNR and in-range line length.
    Evaluate(EvaluateArgs),
    /// Generate synthetic test images.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Re-run the command recorded in a run manifest.
    Replay {
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Stm,
    Afm,
    Sem,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    pub input: PathBuf,
    /// Output directory [default: next to the input].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// STM: inner band-pass radius in pixels, exclusive [default: 20].
    #[arg(long)]
    pub r_low: Option<f64>,
    /// STM: outer band-pass radius in pixels, exclusive [default: 60].
    #[arg(long)]
    pub r_high: Option<f64>,
    /// STM: excluded half-angle around the vertical frequency axis, degrees [default: 30].
    #[arg(long)]
    pub theta_margin: Option<f64>,
    /// AFM: radius around the zero frequency that is never notched, pixels [default: 50].
    #[arg(long)]
    pub dc_radius: Option<f64>,
    /// AFM: Gaussian sigma for the line-energy profile, pixels [default: 0.1].
    #[arg(long)]
    pub smooth_sigma: Option<f64>,
    /// AFM: notch half-width in spectrum lines [default: 1].
    #[arg(long)]
    pub notch_half_width: Option<usize>,
    /// AFM: percentile below which pixels count as dark [default: 50].
    #[arg(long)]
    pub dark_percentile: Option<f64>,
    /// AFM: peak threshold as median + k * MAD of the profile [default: 3].
    #[arg(long)]
    pub mad_factor: Option<f64>,
    /// AFM: which spectrum lines to profile and notch [default: columns].
    #[arg(long)]
    pub axis: Option<gdm_core::preprocess::NotchAxis>,
    /// SEM: 8-bit intensity above which a pixel is a bright-strip artifact [default: 130].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// SEM: inpainting neighborhood radius in pixels [default: 3].
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("inputs").required(true).multiple(true).args(["ch1", "ch2"])))]
pub struct TrainArgs {
    /// Channel 1 training image.
    #[arg(long)]
    pub ch1: Option<PathBuf>,
    /// Channel 2 training image.
    #[arg(long)]
    pub ch2: Option<PathBuf>,
    /// Channel 1 loss weight; w1 + w2 = 1 [default: 1 with one image, 0.5 with two].
    #[arg(long)]
    pub w1: Option<f64>,
    /// Channel 2 loss weight [default: 1 - w1].
    #[arg(long)]
    pub w2: Option<f64>,
    /// Training epochs [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Square patch size in pixels, a multiple of 4 [default: 128].
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Patch stride in pixels [default: the patch size].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Patches per channel per step [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate, halved every 10 epochs [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of pixels masked per patch [default: 0.1].
    #[arg(long)]
    pub mask_fraction: Option<f64>,
    /// Batch reduction of the per-patch losses [default: mean].
    #[arg(long, value_enum)]
    pub reduction: Option<ReductionArg>,
    /// Train on the masked-pixel MSE alone (no Fourier-magnitude term).
    #[arg(long)]
    pub no_fft: bool,
    /// Random seed for initialization, shuffling and masking [default: 0].
    #[arg(long, env = "GDM_SEED")]
    pub seed: Option<u64>,
    /// Encoder widths, comma separated [default: 32,64,128].
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Checkpoint basename; writes BASE.safetensors, BASE.json, BASE.loss.csv, BASE.manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress per-epoch progress.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    /// Checkpoint basename (or its .safetensors / .json file).
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tile size for images above the whole-image limit [default: 128].
    #[arg(long, default_value_t = 128)]
    pub tile: usize,
    /// Tile overlap in pixels [default: 32].
    #[arg(long, default_value_t = 32)]
    pub overlap: usize,
    /// Largest padded pixel count processed in one pass [default: 4194304].
    #[arg(long, default_value_t = 2048 * 2048)]
    pub max_whole_pixels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Stm,
    Afm,
    Sem,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Noisy image; repeat together with --denoised for several pairs.
    #[arg(long, required = true)]
    pub noisy: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub denoised: Vec<PathBuf>,
    /// Detector defaults: stm (sigma 0.1, window -30..30), afm/sem (sigma 1, window -10..10).
    #[arg(long, value_enum, default_value = "stm")]
    pub modality: ModalityArg,
    /// Angle window in degrees, exclusive [default: from --modality].
    #[arg(long, num_args = 2, value_names = ["T1", "T2"], allow_negative_numbers = true)]
    pub theta: Option<Vec<f64>>,
    /// Minimum spectral peak separation and border, pixels [default: 10].
    #[arg(long)]
    pub min_distance: Option<usize>,
    /// Spectral peak threshold relative to the maximum [default: 0.05].
    #[arg(long)]
    pub threshold_rel: Option<f64>,
    /// Seed for the probabilistic Hough transform [default: 0].
    #[arg(long, env = "GDM_SEED")]
    pub seed: Option<u64>,
    /// CSV output path.
    #[arg(long, default_value = "metrics.csv")]
    pub csv: PathBuf,
    /// Directory for spectrum and line overlay PNGs.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum SynthCommand {
    /// Standing-wave pattern around random point defects.
    Qpi(QpiArgs),
    /// Hexagonal lattice texture.
    Lattice(LatticeArgs),
    /// Add an artifact to an existing image.
    Artifact(ArtifactArgs),
}

#[derive(Args, Debug)]
pub struct QpiArgs {
    /// Image side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Physical field of view in nm.
    #[arg(long, default_value_t = 30.0)]
    pub fov_nm: f64,
    #[arg(long, default_value_t = 12)]
    pub scatterers: usize,
    /// Effective mass in units of the electron mass.
    #[arg(long, default_value_t = 0.38)]
    pub mass_ratio: f64,
    /// Chemical potential in eV.
    #[arg(long, default_value_t = 0.45)]
    pub mu: f64,
    /// Amplitude decay exponent.
    #[arg(long, default_value_t = 0.5)]
    pub decay: f64,
    #[arg(long, default_value_t = 0, env = "GDM_SEED")]
    pub seed: u64,
    /// Also write OUT_STEM.noisy.png with scan lines of this amplitude.
    #[arg(long)]
    pub scanlines: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub artifact_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LatticeArgs {
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Nearest-neighbor spacing in pixels.
    #[arg(long, default_value_t = 12.0)]
    pub period: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub angle: f64,
    #[arg(long, default_value_t = 0, env = "GDM_SEED")]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArtifactKindArg {
    Scanlines,
    BrightStrips,
    GaussianNoise,
}

#[derive(Args, Debug)]
pub struct ArtifactArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ArtifactKindArg,
    /// Scan-line offset or strip brightness amplitude.
    #[arg(long, default_value_t = 0.2)]
    pub amplitude: f64,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// Scan lines: jittered segments per row; bright strips: strip count.
    #[arg(long)]
    pub density: Option<f64>,
    /// Maximum tilt of jittered segments and strips, degrees.
    #[arg(long, default_value_t = 5.0)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0, env = "GDM_SEED")]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&args);
    match commands::run(cli, &args[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
