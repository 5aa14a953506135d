use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use mindx::error::{Error, Result};
use mindx::experiments::{run_experiment, ExperimentConfig, SolverSettings};
use mindx::filters::{acwmf, amf, AcwmfParams, AmfParams};
use mindx::image::{psnr, Image};
use mindx::io::{lut_to_csv, read_image, write_image, write_lut, ImageFileMeta, ImageFormat};
use mindx::noise::{corrupt, rescale_to_peak, ImpulseType, NoiseSpec};
use mindx::solver::mindx_denoise_with;
use mindx::vst::LutGrid;

/// Mixed impulse + Poisson-Gaussian denoising.
///
/// Image files hold intensities in `[0, maxval]`. `--peak` rescales them to
/// `[0, peak]` (the photon-count scale of the noise model) on input and back
/// on output. Values outside the range are clipped when written.
#[derive(Parser)]
#[command(name = "mindx", version)]
struct Cli {
    /// Master seed for noise generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file: solver settings for `denoise`, a full experiment for `experiment`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file, or output base path for `experiment`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write a per-iteration trace (`denoise`) or per-cell timings (`experiment`) as CSV.
    #[arg(long, global = true)]
    log_trace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full GAT / outlier pursuit / inverse pipeline.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, value_parser = parse_impulse)]
        impulse: ImpulseType,
        /// Count scale of the image; defaults to the file's maxval.
        #[arg(long)]
        peak: Option<f64>,
        /// Add the patch-denoiser prior next to TV.
        #[arg(long)]
        plug: bool,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        mu: Option<usize>,
        #[arg(long)]
        inner_iters: Option<usize>,
        #[arg(long)]
        outer_iters: Option<usize>,
        /// Clean image for PSNR reporting.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        sixteen_bit: bool,
    },
    /// Apply mixed impulse + Poisson-Gaussian noise to a clean image.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        peak: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        ratio: f64,
        #[arg(long, value_parser = parse_impulse)]
        impulse: ImpulseType,
        /// Corrupt exactly floor(ratio * N) pixels.
        #[arg(long)]
        exact_count: bool,
        /// Also write the impulse mask (white = impulse).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        sixteen_bit: bool,
    },
    /// Adaptive median filter.
    Amf {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 19)]
        max_window: usize,
    },
    /// Adaptive center-weighted median filter.
    Acwmf {
        #[arg(long)]
        input: PathBuf,
        /// Scale of the detection thresholds; defaults to the file's maxval.
        #[arg(long)]
        peak: Option<f64>,
    },
    /// Build the exact unbiased inverse table.
    Lut {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        x_max: f64,
        #[arg(long, default_value_t = LutGrid::default().points)]
        points: usize,
        /// Write CSV instead of the binary format.
        #[arg(long)]
        csv: bool,
    },
    /// Run a PSNR sweep described by `--config`.
    Experiment,
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn parse_impulse(s: &str) -> std::result::Result<ImpulseType, String> {
    match s {
        "salt-pepper" | "sp" => Ok(ImpulseType::SaltPepper),
        "random-valued" | "rv" => Ok(ImpulseType::RandomValued),
        _ => Err(format!("expected salt-pepper or random-valued, got {s:?}")),
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::InvalidParameter("--out is required".into()))
}

fn load_scaled(path: &Path, peak: Option<f64>) -> Result<(Image, ImageFileMeta)> {
    let (img, meta) = read_image(path)?;
    let img = match peak {
        Some(p) => rescale_to_peak(&img, p)?,
        None => img,
    };
    Ok((img, meta))
}

fn output_meta(path: &Path, sixteen_bit: bool) -> Result<ImageFileMeta> {
    Ok(ImageFileMeta::new(ImageFormat::from_path(path, sixteen_bit)?))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Denoise {
            input,
            sigma,
            impulse,
            peak,
            plug,
            lambda,
            rho,
            mu,
            inner_iters,
            outer_iters,
            clean,
            sixteen_bit,
        } => {
            let out = require_out(&cli.out)?;
            let mut settings = match &cli.config {
                Some(path) => toml::from_str::<SolverSettings>(&std::fs::read_to_string(path)?)
                    .map_err(|e| Error::Config(e.to_string()))?,
                None => SolverSettings::default(),
            };
            if let Some(v) = lambda {
                settings.lambda = v;
            }
            if let Some(v) = rho {
                settings.rho = v;
            }
            if let Some(v) = inner_iters {
                settings.inner_iters = v;
            }
            if outer_iters.is_some() {
                settings.outer_iters = outer_iters;
            }
            if mu.is_some() {
                settings.mu = mu;
            }
            let (noisy, _) = load_scaled(&input, peak)?;
            let clean = match clean {
                Some(path) => Some(load_scaled(&path, Some(noisy.peak()))?.0),
                None => None,
            };
            let mut params = settings.params(impulse, plug)?;
            params.convergence_log = cli.log_trace.is_some();
            let lut = settings.build_lut(sigma, noisy.peak())?;
            let result = mindx_denoise_with(&noisy, sigma, &params, impulse, &lut, clean.as_ref())?;
            write_image(&result.image, out, output_meta(out, sixteen_bit)?)?;
            if let Some(c) = &clean {
                say!(
                    "PSNR noisy {:.2} dB, output {:.2} dB",
                    psnr(c, &noisy, noisy.peak())?,
                    psnr(c, &result.image, noisy.peak())?
                );
            }
            say!("mu = {}", result.aop.mu);
            if let Some(path) = &cli.log_trace {
                let aop = &result.aop;
                let mut s = String::from("outer,objective,support,psnr_stabilized\n");
                for (t, (obj, sup)) in aop.objective_trace.iter().zip(&aop.support_trace).enumerate() {
                    let p = aop.psnr_trace.get(t).map_or_else(String::new, |v| format!("{v:.4}"));
                    let _ = writeln!(s, "{},{obj:.6},{sup},{p}", t + 1);
                }
                std::fs::write(path, s)?;
            }
        }
        Command::Corrupt {
            input,
            peak,
            sigma,
            ratio,
            impulse,
            exact_count,
            mask,
            sixteen_bit,
        } => {
            let out = require_out(&cli.out)?;
            let (clean, _) = load_scaled(&input, Some(peak))?;
            let spec = NoiseSpec {
                peak,
                sigma,
                impulse_ratio: ratio,
                impulse_type: impulse,
                seed: cli.seed.unwrap_or(0),
                exact_count,
            };
            let (noisy, omega) = corrupt(&clean, &spec)?;
            write_image(&noisy, out, output_meta(out, sixteen_bit)?)?;
            if let Some(path) = mask {
                let bits = omega.bits().iter().map(|&ok| if ok { 0.0 } else { 1.0 }).collect();
                let img = Image::new(omega.width(), omega.height(), bits, 1.0)?;
                write_image(&img, &path, output_meta(&path, false)?)?;
            }
            say!(
                "PSNR {:.2} dB, {} impulse pixels",
                psnr(&clean, &noisy, peak)?,
                omega.count_false()
            );
        }
        Command::Amf { input, max_window } => {
            let out = require_out(&cli.out)?;
            let (img, meta) = read_image(&input)?;
            let params = AmfParams {
                max_window,
                ..AmfParams::default()
            };
            write_image(&amf(&img, &params)?, out, output_meta(out, meta.format.declared_max() > 255)?)?;
        }
        Command::Acwmf { input, peak } => {
            let out = require_out(&cli.out)?;
            let (img, meta) = load_scaled(&input, peak)?;
            let filtered = acwmf(&img, &AcwmfParams::for_peak(img.peak()))?;
            write_image(&filtered, out, output_meta(out, meta.format.declared_max() > 255)?)?;
        }
        Command::Lut {
            sigma,
            x_max,
            points,
            csv,
        } => {
            let out = require_out(&cli.out)?;
            let grid = LutGrid {
                points,
                ..LutGrid::default()
            };
            let lut = mindx::vst::build_exact_unbiased_lut_with(sigma, x_max, grid)?;
            if csv {
                std::fs::write(out, lut_to_csv(&lut))?;
            } else {
                write_lut(&lut, out)?;
            }
        }
        Command::Experiment => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("experiment needs --config".into()))?;
            let mut config = ExperimentConfig::load(path)?;
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            let base = cli
                .out
                .clone()
                .or_else(|| config.output.clone())
                .ok_or_else(|| Error::InvalidParameter("no output path: pass --out or set output".into()))?;
            let started = unix_now();
            let table = run_experiment(&config)?;
            table.write(&base, started, unix_now())?;
            if let Some(trace) = &cli.log_trace {
                std::fs::write(trace, table.timings_csv())?;
            }
            let _ = write!(std::io::stdout().lock(), "{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
