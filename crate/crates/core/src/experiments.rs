//! Seeded PSNR sweeps over noise conditions.
//!
//! A run corrupts every (image, grid point) cell once and scores each method
//! on the same noisy image. Cells run in a rayon pool; the table is sorted
//! afterwards by image and method in config order, then by grid value.
//!
//! Per-cell noise seed:
//!
//! ```text
//! seed = splitmix64(splitmix64(master ^ splitmix64(image_index)) ^ splitmix64(grid_index + 2^32))
//! ```
//!
//! so cells are independent but a cell's noise does not depend on which
//! methods or other grid points are present.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoisers::{denoise, DenoiserSpec};
use crate::error::{invalid, Error, Result};
use crate::filters::{acwmf, amf, impulse_filter, AcwmfParams, AmfParams};
use crate::image::{psnr, Image, PixelMask};
use crate::io::{decode_image, load_or_build_lut, read_image};
use crate::noise::{corrupt, rescale_to_peak, ImpulseType, NoiseSpec};
use crate::operators::{RegularizerConfig, StrengthMode};
use crate::solver::{
    default_lut_x_max, mindx_denoise_with, CpVariant, DetectionDomain, InitialEstimate,
    SolverParams, ZRule, DEFAULT_LAMBDA, DEFAULT_MU_THRESHOLD, DEFAULT_RHO,
};
use crate::vst::{build_exact_unbiased_lut_with, gat_forward, igat_exact_unbiased, GatLut, LutGrid};

pub const SCHEMA_VERSION: u32 = 1;

/// Column header of the CSV table.
pub const CSV_HEADER: &str = "image,method,grid_param,grid_value,psnr_db";

const CAMERA_PGM: &[u8] = include_bytes!("../fixtures/camera_128.pgm");
const MOON_PGM: &[u8] = include_bytes!("../fixtures/moon_128.pgm");

/// Names accepted as `builtin:<name>` image sources.
pub const BUILTIN_IMAGES: [&str; 4] = ["ramp", "shapes", "camera", "moon"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Grid over the peak `p`, with `σ = sigma_over_peak · p`.
    PeakSweep,
    /// Grid over `σ / √p` at a fixed peak.
    GaussRatioSweep,
    /// Grid over the impulse ratio `r` at a fixed peak.
    ImpulseSweep,
    /// Fixed parameters only; the grid holds a single peak.
    Single,
}

impl ExperimentKind {
    pub fn grid_param(self) -> &'static str {
        match self {
            ExperimentKind::PeakSweep | ExperimentKind::Single => "peak",
            ExperimentKind::GaussRatioSweep => "sigma_ratio",
            ExperimentKind::ImpulseSweep => "impulse_ratio",
        }
    }

    /// Default grid: peaks 1..120, σ/√p 0..5, or r 10%..90%.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            ExperimentKind::PeakSweep => vec![1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 60.0, 120.0],
            ExperimentKind::GaussRatioSweep => vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0],
            ExperimentKind::ImpulseSweep => vec![0.1, 0.3, 0.5, 0.7, 0.9],
            ExperimentKind::Single => vec![20.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Noisy,
    Amf,
    Acwmf,
    /// Impulse filter, GAT, patch denoiser, exact unbiased inverse.
    GatDenoise,
    #[serde(rename = "mindx-tv")]
    MindxTv,
    #[serde(rename = "mindx-tv-plug")]
    MindxTvPlug,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Noisy,
        Method::Amf,
        Method::Acwmf,
        Method::GatDenoise,
        Method::MindxTv,
        Method::MindxTvPlug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Noisy => "noisy",
            Method::Amf => "amf",
            Method::Acwmf => "acwmf",
            Method::GatDenoise => "gat-denoise",
            Method::MindxTv => "mindx-tv",
            Method::MindxTvPlug => "mindx-tv-plug",
        }
    }

    fn needs_lut(self) -> bool {
        matches!(self, Method::GatDenoise | Method::MindxTv | Method::MindxTvPlug)
    }
}

/// Noise parameters held fixed while the grid varies one of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedParams {
    pub peak: f64,
    pub sigma_over_peak: f64,
    pub impulse_ratio: f64,
    pub impulse_type: ImpulseType,
    pub exact_count: bool,
}

impl Default for FixedParams {
    fn default() -> Self {
        Self {
            peak: 20.0,
            sigma_over_peak: 0.1,
            impulse_ratio: 0.5,
            impulse_type: ImpulseType::SaltPepper,
            exact_count: false,
        }
    }
}

/// Solver and baseline knobs in config form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub lambda: f64,
    /// Plug-in weight; equal to `lambda` when absent.
    pub lambda2: Option<f64>,
    pub rho: f64,
    pub theta: f64,
    pub inner_iters: usize,
    /// Defaults to 1 for salt-and-pepper and 10 for random-valued impulses.
    pub outer_iters: Option<usize>,
    pub mu: Option<usize>,
    /// Use the true number of corrupted pixels as μ.
    pub oracle_mu: bool,
    pub mu_threshold: f64,
    pub variant: CpVariant,
    pub z_rule: ZRule,
    pub detection: DetectionDomain,
    pub initial_estimate: InitialEstimate,
    pub early_stop: Option<f64>,
    pub plug_denoiser: DenoiserSpec,
    pub strength_mode: StrengthMode,
    /// Denoiser used by the `gat-denoise` baseline.
    pub baseline_denoiser: DenoiserSpec,
    pub lut_points: usize,
    pub lut_cache: Option<PathBuf>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            lambda2: None,
            rho: DEFAULT_RHO,
            theta: 1.0,
            inner_iters: 500,
            outer_iters: None,
            mu: None,
            oracle_mu: false,
            mu_threshold: DEFAULT_MU_THRESHOLD,
            variant: CpVariant::default(),
            z_rule: ZRule::default(),
            detection: DetectionDomain::default(),
            initial_estimate: InitialEstimate::default(),
            early_stop: None,
            plug_denoiser: DenoiserSpec::patch_transform(1.0),
            strength_mode: StrengthMode::Fixed,
            baseline_denoiser: DenoiserSpec::patch_transform(1.0),
            lut_points: LutGrid::default().points,
            lut_cache: None,
        }
    }
}

impl SolverSettings {
    /// Solver parameters for MindX-TV, or MindX-TV with the plug-in prior.
    pub fn params(&self, impulse_type: ImpulseType, plug: bool) -> Result<SolverParams> {
        let reg = if plug {
            RegularizerConfig::new(
                self.lambda,
                self.lambda2.unwrap_or(self.lambda),
                Some(self.plug_denoiser.clone()),
                self.rho,
                self.theta,
            )?
            .with_strength_mode(self.strength_mode)
        } else {
            RegularizerConfig::new(self.lambda, 0.0, None, self.rho, self.theta)?
        };
        let mut p = SolverParams::with_reg(impulse_type, reg);
        if let Some(t) = self.outer_iters {
            p.outer_iters = t;
        }
        p.inner.iterations = self.inner_iters;
        p.inner.variant = self.variant;
        p.inner.early_stop = self.early_stop;
        p.mu = self.mu;
        p.mu_threshold = self.mu_threshold;
        p.z_rule = self.z_rule;
        p.detection = self.detection;
        p.initial_estimate = self.initial_estimate;
        Ok(p)
    }

    pub fn lut_grid(&self) -> LutGrid {
        LutGrid {
            points: self.lut_points,
            ..LutGrid::default()
        }
    }

    pub fn build_lut(&self, sigma: f64, peak: f64) -> Result<GatLut> {
        let x_max = default_lut_x_max(peak);
        match &self.lut_cache {
            Some(dir) => load_or_build_lut(dir, sigma, x_max, self.lut_grid()),
            None => build_exact_unbiased_lut_with(sigma, x_max, self.lut_grid()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// File paths or `builtin:<name>`.
    pub images: Vec<String>,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub grid: Vec<f64>,
    #[serde(default)]
    pub fixed: FixedParams,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub solver: SolverSettings,
    pub seed: u64,
    /// Side length of the center crop; larger images are cropped.
    #[serde(default = "default_crop")]
    pub crop: usize,
    /// Base path of the output files (`.csv`, `.md`, `.meta.toml`).
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_crop() -> usize {
    128
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.grid.is_empty() {
            cfg.grid = cfg.experiment.default_grid();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.images.is_empty() {
            return Err(Error::Config("no images listed".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods listed".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop must be positive".into()));
        }
        if self.experiment == ExperimentKind::Single && self.grid.len() != 1 {
            return Err(Error::Config("a single experiment takes exactly one grid value".into()));
        }
        for &g in &self.grid {
            let ok = match self.experiment {
                ExperimentKind::PeakSweep | ExperimentKind::Single => g > 0.0 && g.is_finite(),
                ExperimentKind::GaussRatioSweep => g >= 0.0 && g.is_finite(),
                ExperimentKind::ImpulseSweep => (0.0..=1.0).contains(&g),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "grid value {g} is out of range for {}",
                    self.experiment.grid_param()
                )));
            }
        }
        for (i, g) in self.grid.iter().enumerate() {
            if self.grid[..i].iter().any(|h| h.to_bits() == g.to_bits()) {
                return Err(Error::Config(format!("grid value {g} listed twice")));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {} listed twice", m.name())));
            }
        }
        let f = &self.fixed;
        if !(f.peak > 0.0 && f.sigma_over_peak >= 0.0 && (0.0..=1.0).contains(&f.impulse_ratio)) {
            return Err(Error::Config("fixed noise parameters out of range".into()));
        }
        self.solver.params(f.impulse_type, self.methods.contains(&Method::MindxTvPlug))?;
        Ok(())
    }

    /// Noise parameters of one grid point.
    pub fn noise_at(&self, grid_value: f64, seed: u64) -> NoiseSpec {
        let f = &self.fixed;
        let (peak, sigma, ratio) = match self.experiment {
            ExperimentKind::PeakSweep | ExperimentKind::Single => {
                (grid_value, f.sigma_over_peak * grid_value, f.impulse_ratio)
            }
            ExperimentKind::GaussRatioSweep => (f.peak, grid_value * f.peak.sqrt(), f.impulse_ratio),
            ExperimentKind::ImpulseSweep => (f.peak, f.sigma_over_peak * f.peak, grid_value),
        };
        NoiseSpec {
            peak,
            sigma,
            impulse_ratio: ratio,
            impulse_type: f.impulse_type,
            seed,
            exact_count: f.exact_count,
        }
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn cell_seed(master: u64, image_index: usize, grid_index: usize) -> u64 {
    let a = splitmix64(master ^ splitmix64(image_index as u64));
    splitmix64(a ^ splitmix64(grid_index as u64 + (1 << 32)))
}

/// 128x128 diagonal ramp from 0 to 255.
pub fn ramp_fixture(size: usize) -> Image {
    let d = (2 * size.saturating_sub(1)).max(1) as f64;
    Image::from_fn(size, size, 255.0, |r, c| 255.0 * (r + c) as f64 / d).expect("valid fixture")
}

/// Piecewise-constant scene: rectangle, disk and triangle on a dark field.
pub fn shapes_fixture(size: usize) -> Image {
    let s = size as f64;
    Image::from_fn(size, size, 255.0, |r, c| {
        let (y, x) = (r as f64 / s, c as f64 / s);
        if (0.1..0.45).contains(&x) && (0.15..0.55).contains(&y) {
            200.0
        } else if (x - 0.68).powi(2) + (y - 0.32).powi(2) < 0.2 * 0.2 {
            120.0
        } else if y > 0.6 && y < 0.92 && (x - 0.5).abs() < (y - 0.6) * 0.9 {
            235.0
        } else {
            40.0
        }
    })
    .expect("valid fixture")
}

/// Resolves an image source: `builtin:<name>` or a file path.
pub fn load_source(source: &str) -> Result<(String, Image)> {
    if let Some(name) = source.strip_prefix("builtin:") {
        let img = match name {
            "ramp" => ramp_fixture(128),
            "shapes" => shapes_fixture(128),
            "camera" => decode_image(CAMERA_PGM)?.0,
            "moon" => decode_image(MOON_PGM)?.0,
            _ => {
                return Err(Error::Config(format!(
                    "unknown builtin image {name:?}; choose one of {BUILTIN_IMAGES:?}"
                )))
            }
        };
        return Ok((name.to_string(), img));
    }
    let path = Path::new(source);
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(source)
        .to_string();
    Ok((name, read_image(path)?.0))
}

/// Center crop to at most `size x size`.
pub fn center_crop(img: &Image, size: usize) -> Image {
    let (w, h) = (img.width().min(size), img.height().min(size));
    let (c0, r0) = ((img.width() - w) / 2, (img.height() - h) / 2);
    Image::from_fn(w, h, img.peak(), |r, c| img.get(r + r0, c + c0)).expect("crop of a valid image")
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    Psnr(f64),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub image: String,
    pub method: Method,
    pub grid_param: &'static str,
    pub grid_value: f64,
    pub outcome: CellOutcome,
    image_index: usize,
    method_index: usize,
}

/// Wall-clock cost of one method on one cell. Kept out of the tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTiming {
    pub image: String,
    pub method: Method,
    pub grid_value: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
    pub timings: Vec<CellTiming>,
}

impl ResultTable {
    pub fn empty(seed: u64, config_hash: String) -> Self {
        Self {
            seed,
            config_hash,
            rows: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn push(&mut self, image: &str, method: Method, grid_param: &'static str, grid_value: f64, outcome: CellOutcome) {
        let image_index = self
            .rows
            .iter()
            .find(|r| r.image == image)
            .map_or_else(|| self.rows.iter().map(|r| r.image_index + 1).max().unwrap_or(0), |r| r.image_index);
        let method_index = Method::ALL.iter().position(|&m| m == method).unwrap_or(0);
        self.rows.push(ResultRow {
            image: image.to_string(),
            method,
            grid_param,
            grid_value,
            outcome,
            image_index,
            method_index,
        });
        self.sort();
    }

    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.image_index
                .cmp(&b.image_index)
                .then(a.method_index.cmp(&b.method_index))
                .then(a.grid_value.total_cmp(&b.grid_value))
        });
    }

    pub fn get(&self, image: &str, method: Method, grid_value: f64) -> Option<&CellOutcome> {
        self.rows
            .iter()
            .find(|r| r.image == image && r.method == method && r.grid_value == grid_value)
            .map(|r| &r.outcome)
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("image,method,grid_value,seconds\n");
        for t in &self.timings {
            let _ = writeln!(out, "{},{},{},{:.3}", t.image, t.method.name(), t.grid_value, t.seconds);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.image,
                r.method.name(),
                r.grid_param,
                r.grid_value,
                format_outcome(&r.outcome)
            );
        }
        out
    }

    /// One table per image: methods as rows, grid values as columns.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let mut images: Vec<(usize, &str)> = self.rows.iter().map(|r| (r.image_index, r.image.as_str())).collect();
        images.dedup();
        for (_, image) in images {
            let rows: Vec<&ResultRow> = self.rows.iter().filter(|r| r.image == image).collect();
            let mut grid: Vec<f64> = rows.iter().map(|r| r.grid_value).collect();
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            let param = rows[0].grid_param;
            let _ = writeln!(out, "### {image}\n");
            out.push_str("| method |");
            for g in &grid {
                let _ = write!(out, " {param}={g} |");
            }
            out.push_str("\n|---|");
            out.push_str(&"---:|".repeat(grid.len()));
            out.push('\n');
            let mut methods: Vec<(usize, Method)> = rows.iter().map(|r| (r.method_index, r.method)).collect();
            methods.sort_by_key(|m| m.0);
            methods.dedup();
            for (_, m) in methods {
                let _ = write!(out, "| {} |", m.name());
                for &g in &grid {
                    let cell = rows
                        .iter()
                        .find(|r| r.method == m && r.grid_value == g)
                        .map_or_else(String::new, |r| format_outcome(&r.outcome));
                    let _ = write!(out, " {cell} |");
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<base>.csv`, `<base>.md` and a `<base>.meta.toml` sidecar with
    /// the seed, config hash and wall-clock timestamps.
    pub fn write(&self, base: &Path, started: u64, finished: u64) -> Result<()> {
        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(base.with_extension("csv"), self.to_csv())?;
        std::fs::write(base.with_extension("md"), self.to_markdown())?;
        let meta = format!(
            "schema_version = {SCHEMA_VERSION}\nseed = {}\nconfig_hash = \"{}\"\nstarted_unix = {started}\nfinished_unix = {finished}\n",
            self.seed, self.config_hash
        );
        std::fs::write(base.with_extension("meta.toml"), meta)?;
        Ok(())
    }
}

fn format_outcome(o: &CellOutcome) -> String {
    match o {
        CellOutcome::Psnr(v) if v.is_infinite() && *v > 0.0 => "inf".into(),
        CellOutcome::Psnr(v) => format!("{v:.2}"),
        CellOutcome::Failed(_) => "FAIL".into(),
    }
}

struct Cell<'a> {
    image_index: usize,
    name: &'a str,
    clean: &'a Image,
    grid_value: f64,
    noise: NoiseSpec,
}

/// Runs a method on an already corrupted image.
pub fn apply_method(
    method: Method,
    noisy: &Image,
    noise: &NoiseSpec,
    mask: &PixelMask,
    settings: &SolverSettings,
    lut: Option<&GatLut>,
) -> Result<Image> {
    let needs = || lut.ok_or_else(|| Error::InvalidParameter("lookup table missing".into()));
    match method {
        Method::Noisy => Ok(noisy.clone()),
        Method::Amf => amf(noisy, &AmfParams::default()),
        Method::Acwmf => acwmf(noisy, &AcwmfParams::for_peak(noisy.peak())),
        Method::GatDenoise => {
            let pre = impulse_filter(noisy, noise.impulse_type)?;
            let stabilized = gat_forward(&pre, noise.sigma)?;
            let smooth = denoise(&stabilized, &settings.baseline_denoiser)?;
            igat_exact_unbiased(&smooth, needs()?).with_peak(noisy.peak())
        }
        Method::MindxTv | Method::MindxTvPlug => {
            let mut params = settings.params(noise.impulse_type, method == Method::MindxTvPlug)?;
            if settings.oracle_mu {
                params.mu = Some(mask.count_false());
            }
            Ok(mindx_denoise_with(noisy, noise.sigma, &params, noise.impulse_type, needs()?, None)?.image)
        }
    }
}

fn lut_key(noise: &NoiseSpec) -> (u64, u64) {
    (noise.sigma.to_bits(), noise.peak.to_bits())
}

/// Runs every cell of the sweep. Stage failures become `FAIL` cells.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultTable> {
    config.validate()?;
    let mut images = Vec::with_capacity(config.images.len());
    for src in &config.images {
        let (name, img) = load_source(src)?;
        images.push((name, center_crop(&img, config.crop)));
    }
    for (i, (name, _)) in images.iter().enumerate() {
        if images[..i].iter().any(|(n, _)| n == name) {
            return invalid(format!("two images share the name {name:?}"));
        }
    }

    let mut cells = Vec::new();
    for (ii, (name, img)) in images.iter().enumerate() {
        for (gi, &g) in config.grid.iter().enumerate() {
            cells.push(Cell {
                image_index: ii,
                name,
                clean: img,
                grid_value: g,
                noise: config.noise_at(g, cell_seed(config.seed, ii, gi)),
            });
        }
    }

    let mut luts: BTreeMap<(u64, u64), std::result::Result<GatLut, String>> = BTreeMap::new();
    if config.methods.iter().any(|m| m.needs_lut()) {
        for cell in &cells {
            luts.entry(lut_key(&cell.noise)).or_insert_with(|| {
                config
                    .solver
                    .build_lut(cell.noise.sigma, cell.noise.peak)
                    .map_err(|e| e.to_string())
            });
        }
    }

    let param = config.experiment.grid_param();
    let mut timings = Vec::new();
    let mut rows: Vec<ResultRow> = cells
        .par_iter()
        .flat_map_iter(|cell| {
            let corrupted = rescale_to_peak(cell.clean, cell.noise.peak)
                .and_then(|clean| corrupt(&clean, &cell.noise).map(|(y, m)| (clean, y, m)));
            let lut = luts.get(&lut_key(&cell.noise));
            let outcomes: Vec<(usize, Method, CellOutcome, f64)> = config
                .methods
                .iter()
                .enumerate()
                .map(|(mi, &method)| {
                    let start = Instant::now();
                    let result = corrupted.as_ref().map_err(|e| e.to_string()).and_then(|(clean, noisy, mask)| {
                        let lut = match lut {
                            Some(Ok(l)) => Some(l),
                            Some(Err(e)) => return Err(e.clone()),
                            None => None,
                        };
                        apply_method(method, noisy, &cell.noise, mask, &config.solver, lut)
                            .and_then(|out| psnr(clean, &out, cell.noise.peak))
                            .map_err(|e| e.to_string())
                    });
                    let outcome = match result {
                        Ok(v) => CellOutcome::Psnr(v),
                        Err(e) => {
                            log::warn!("{} / {} at {param}={}: {e}", cell.name, method.name(), cell.grid_value);
                            CellOutcome::Failed(e)
                        }
                    };
                    (mi, method, outcome, start.elapsed().as_secs_f64())
                })
                .collect();
            outcomes.into_iter().map(move |(mi, method, outcome, seconds)| {
                let row = ResultRow {
                    image: cell.name.to_string(),
                    method,
                    grid_param: param,
                    grid_value: cell.grid_value,
                    outcome,
                    image_index: cell.image_index,
                    method_index: mi,
                };
                (row, seconds)
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|(row, seconds)| {
            timings.push(CellTiming {
                image: row.image.clone(),
                method: row.method,
                grid_value: row.grid_value,
                seconds,
            });
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        a.image_index
            .cmp(&b.image_index)
            .then(a.method_index.cmp(&b.method_index))
            .then(a.grid_value.total_cmp(&b.grid_value))
    });
    Ok(ResultTable {
        seed: config.seed,
        config_hash: config.hash()?,
        rows,
        timings,
    })
}
