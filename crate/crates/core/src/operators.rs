//! Linear operators and proximal maps for the primal-dual inner solver.
//!
//! The stacked operator is `K = [∇; I]`, where the identity block is only
//! present when the plug-in prior is active (`lambda2 > 0`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::denoisers::{denoise, DenoiserSpec};
use crate::error::{invalid, Result};
use crate::image::{check_dims, Image, PixelMask};

/// Forward differences of an image, zero on the last column (`gx`) and the
/// last row (`gy`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    width: usize,
    height: usize,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
}

impl GradField {
    pub fn new(width: usize, height: usize, gx: Vec<f64>, gy: Vec<f64>) -> Result<Self> {
        if gx.len() != width * height || gy.len() != width * height {
            return invalid(format!("gradient planes do not match {width}x{height}"));
        }
        Ok(Self {
            width,
            height,
            gx,
            gy,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            gx: vec![0.0; width * height],
            gy: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dot(&self, other: &GradField) -> f64 {
        dot(&self.gx, &other.gx) + dot(&self.gy, &other.gy)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Dual variable of the stacked operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DualVariable {
    pub grad_part: GradField,
    /// Allocated only when the identity branch is active.
    pub id_part: Option<Image>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn grad_into(src: &[f64], w: usize, h: usize, gx: &mut [f64], gy: &mut [f64]) {
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let gxr = &mut gx[r * w..(r + 1) * w];
        for c in 0..w - 1 {
            gxr[c] = row[c + 1] - row[c];
        }
        gxr[w - 1] = 0.0;
        let gyr = &mut gy[r * w..(r + 1) * w];
        if r + 1 < h {
            let next = &src[(r + 1) * w..(r + 2) * w];
            for c in 0..w {
                gyr[c] = next[c] - row[c];
            }
        } else {
            gyr.fill(0.0);
        }
    }
}

/// Negative adjoint of [`grad_into`]; entries of `gx`/`gy` on the last
/// column/row are ignored, matching the gradient's zero boundary.
pub(crate) fn div_into(gx: &[f64], gy: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut v = 0.0;
            if c + 1 < w {
                v += gx[i];
            }
            if c > 0 {
                v -= gx[i - 1];
            }
            if r + 1 < h {
                v += gy[i];
            }
            if r > 0 {
                v -= gy[i - w];
            }
            out[i] = v;
        }
    }
}

pub fn grad(img: &Image) -> GradField {
    let (w, h) = (img.width(), img.height());
    let mut field = GradField::zeros(w, h);
    grad_into(img.data(), w, h, &mut field.gx, &mut field.gy);
    field
}

/// Discrete divergence with `<grad x, u> = -<x, div u>`. The result carries
/// a unit peak.
pub fn div(field: &GradField) -> Image {
    let (w, h) = (field.width, field.height);
    let mut out = vec![0.0; w * h];
    div_into(&field.gx, &field.gy, w, h, &mut out);
    Image::new(w, h, out, 1.0).expect("finite field gives finite divergence")
}

/// Isotropic total variation `Σ_i ||∇x_i||_2`.
pub fn tv_norm(img: &Image) -> f64 {
    let g = grad(img);
    g.gx.iter().zip(&g.gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// How the plug-in denoiser strength reacts to the prox step size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrengthMode {
    /// Use the configured strength unchanged.
    #[default]
    Fixed,
    /// Multiply the strength by `sqrt(lambda2 * step)`.
    ScaledBySqrtStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RegularizerSettings {
    #[serde(default)]
    lambda1: f64,
    #[serde(default)]
    lambda2: f64,
    #[serde(default)]
    denoiser: Option<DenoiserSpec>,
    #[serde(default)]
    strength_mode: StrengthMode,
    rho: f64,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default = "default_theta")]
    theta: f64,
}

fn default_theta() -> f64 {
    1.0
}

/// Regularization weights and primal-dual step sizes.
///
/// The step condition `tau * rho * ||K||^2 <= 1` is checked on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegularizerSettings", into = "RegularizerSettings")]
pub struct RegularizerConfig {
    lambda1: f64,
    lambda2: f64,
    denoiser: Option<DenoiserSpec>,
    strength_mode: StrengthMode,
    rho: f64,
    tau: f64,
    theta: f64,
}

impl TryFrom<RegularizerSettings> for RegularizerConfig {
    type Error = crate::error::Error;

    fn try_from(s: RegularizerSettings) -> Result<Self> {
        let cfg = RegularizerConfig::new(s.lambda1, s.lambda2, s.denoiser, s.rho, s.theta)?
            .with_strength_mode(s.strength_mode);
        match s.tau {
            Some(tau) => cfg.with_tau(tau),
            None => Ok(cfg),
        }
    }
}

impl From<RegularizerConfig> for RegularizerSettings {
    fn from(c: RegularizerConfig) -> Self {
        Self {
            lambda1: c.lambda1,
            lambda2: c.lambda2,
            denoiser: c.denoiser,
            strength_mode: c.strength_mode,
            rho: c.rho,
            tau: Some(c.tau),
            theta: c.theta,
        }
    }
}

impl RegularizerConfig {
    /// Builds a config with `tau = 1 / (rho ||K||^2)`.
    pub fn new(
        lambda1: f64,
        lambda2: f64,
        denoiser: Option<DenoiserSpec>,
        rho: f64,
        theta: f64,
    ) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return invalid(format!(
                "regularization weights must be finite and >= 0, got {lambda1}, {lambda2}"
            ));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return invalid(format!("rho must be positive, got {rho}"));
        }
        if !theta.is_finite() {
            return invalid("theta must be finite");
        }
        if lambda2 > 0.0 {
            match &denoiser {
                Some(d) => d.validate()?,
                None => return invalid("lambda2 > 0 requires a denoiser"),
            }
        }
        let mut cfg = Self {
            lambda1,
            lambda2,
            denoiser,
            strength_mode: StrengthMode::Fixed,
            rho,
            tau: 0.0,
            theta,
        };
        cfg.tau = 1.0 / (rho * operator_norm_sq(&cfg));
        Ok(cfg)
    }

    /// Total-variation-only configuration.
    pub fn tv(lambda1: f64, rho: f64) -> Result<Self> {
        Self::new(lambda1, 0.0, None, rho, 1.0)
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return invalid(format!("tau must be positive, got {tau}"));
        }
        let product = tau * self.rho * operator_norm_sq(&self);
        if product > 1.0 + 1e-12 {
            return invalid(format!(
                "step condition violated: tau * rho * ||K||^2 = {product} > 1"
            ));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn with_strength_mode(mut self, mode: StrengthMode) -> Self {
        self.strength_mode = mode;
        self
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn denoiser(&self) -> Option<&DenoiserSpec> {
        self.denoiser.as_ref()
    }

    pub fn strength_mode(&self) -> StrengthMode {
        self.strength_mode
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn has_identity_branch(&self) -> bool {
        self.lambda2 > 0.0
    }

    pub fn tv_prior(&self) -> TvPrior {
        TvPrior {
            lambda1: self.lambda1,
        }
    }

    pub fn plugin_prior(&self) -> Option<PluginPrior> {
        if !self.has_identity_branch() {
            return None;
        }
        Some(PluginPrior {
            lambda2: self.lambda2,
            denoiser: self.denoiser.clone()?,
            mode: self.strength_mode,
        })
    }
}

/// Analytic bound on `||K||^2`: 8 for `K = ∇`, 9 for `K = [∇; I]`.
pub fn operator_norm_sq(config: &RegularizerConfig) -> f64 {
    if config.has_identity_branch() {
        9.0
    } else {
        8.0
    }
}

/// Largest eigenvalue of `KᵀK` on a `width x height` grid by power iteration.
pub fn power_iteration_norm_sq(
    width: usize,
    height: usize,
    with_identity: bool,
    iterations: usize,
    seed: u64,
) -> f64 {
    let n = width * height;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let (mut gx, mut gy, mut y) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let norm = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= norm);
        grad_into(&x, width, height, &mut gx, &mut gy);
        div_into(&gx, &gy, width, height, &mut y);
        // KᵀK x = −div ∇x (+ x)
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi = -*yi + if with_identity { *xi } else { 0.0 };
        }
        estimate = dot(&x, &y);
        std::mem::swap(&mut x, &mut y);
    }
    estimate
}

/// Vector-space operations needed by the Moreau decomposition.
pub trait DualSpace: Clone {
    fn scaled(&self, a: f64) -> Self;
    /// `self + a * other`
    fn add_scaled(&self, a: f64, other: &Self) -> Self;
}

impl DualSpace for Image {
    fn scaled(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    fn add_scaled(&self, a: f64, other: &Self) -> Self {
        assert!(self.same_dims(other));
        self.with_data(
            self.data()
                .iter()
                .zip(other.data())
                .map(|(x, y)| x + a * y)
                .collect(),
        )
    }
}

impl DualSpace for GradField {
    fn scaled(&self, a: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            gx: self.gx.iter().map(|v| a * v).collect(),
            gy: self.gy.iter().map(|v| a * v).collect(),
        }
    }

    fn add_scaled(&self, a: f64, other: &Self) -> Self {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Self {
            width: self.width,
            height: self.height,
            gx: self.gx.iter().zip(&other.gx).map(|(x, y)| x + a * y).collect(),
            gy: self.gy.iter().zip(&other.gy).map(|(x, y)| x + a * y).collect(),
        }
    }
}

/// A function `g` with a computable proximal map `prox_{step·g}`.
pub trait Prox<T> {
    fn prox(&self, t: &T, step: f64) -> Result<T>;
}

/// `lambda1 * ||·||_{2,1}` on gradient fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvPrior {
    pub lambda1: f64,
}

impl Prox<GradField> for TvPrior {
    fn prox(&self, t: &GradField, step: f64) -> Result<GradField> {
        Ok(prox_tv_dual_shrink(t, self.lambda1, step))
    }
}

/// Implicit prior whose prox is a Gaussian denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginPrior {
    pub lambda2: f64,
    pub denoiser: DenoiserSpec,
    pub mode: StrengthMode,
}

impl Prox<Image> for PluginPrior {
    fn prox(&self, t: &Image, step: f64) -> Result<Image> {
        let spec = match self.mode {
            StrengthMode::Fixed => self.denoiser.clone(),
            StrengthMode::ScaledBySqrtStep => self
                .denoiser
                .with_strength(self.denoiser.strength * (self.lambda2 * step).sqrt()),
        };
        prox_denoiser(t, &spec)
    }
}

/// Pointwise shrinkage `t_i − λρ t_i / max(λρ, ||t_i||)`, the prox of
/// `ρλ||·||_{2,1}`.
pub fn prox_tv_dual_shrink(t: &GradField, lambda1: f64, rho: f64) -> GradField {
    let thr = lambda1 * rho;
    let mut out = t.clone();
    if thr == 0.0 {
        return out;
    }
    for (x, y) in out.gx.iter_mut().zip(out.gy.iter_mut()) {
        let norm = x.hypot(*y);
        let f = 1.0 - thr / thr.max(norm);
        *x *= f;
        *y *= f;
    }
    out
}

pub fn prox_denoiser(t: &Image, denoiser: &DenoiserSpec) -> Result<Image> {
    denoise(t, denoiser)
}

/// `prox_{ρ g*}(t) = t − ρ prox_{ρ⁻¹ g}(t / ρ)`.
pub fn prox_conjugate<T: DualSpace, G: Prox<T>>(g: &G, t: &T, rho: f64) -> Result<T> {
    if !(rho > 0.0) {
        return invalid(format!("rho must be positive, got {rho}"));
    }
    let inner = g.prox(&t.scaled(1.0 / rho), 1.0 / rho)?;
    Ok(t.add_scaled(-rho, &inner))
}

/// Branch-wise conjugate prox of the stacked regularizer.
pub fn prox_conjugate_stacked(t: &DualVariable, reg: &RegularizerConfig) -> Result<DualVariable> {
    let grad_part = prox_conjugate(&reg.tv_prior(), &t.grad_part, reg.rho())?;
    let id_part = match (&t.id_part, reg.plugin_prior()) {
        (Some(part), Some(prior)) => Some(prox_conjugate(&prior, part, reg.rho())?),
        (None, None) => None,
        _ => return invalid("dual variable branches do not match the regularizer"),
    };
    Ok(DualVariable { grad_part, id_part })
}

/// Prox of `τ ||w_Ω − ỹ_Ω||²`: masked pixels blend toward `ỹ`, others pass.
pub fn prox_data(t: &Image, y_tilde: &Image, mask: &PixelMask, tau: f64) -> Result<Image> {
    t.check_same_dims(y_tilde)?;
    check_dims(t.width(), t.height(), mask.width(), mask.height())?;
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let mut out = t.data().to_vec();
    prox_data_in_place(&mut out, y_tilde.data(), mask.bits(), tau);
    Ok(t.with_data(out))
}

pub(crate) fn prox_data_in_place(t: &mut [f64], y: &[f64], mask: &[bool], tau: f64) {
    let a = 2.0 * tau / (2.0 * tau + 1.0);
    let b = 1.0 / (2.0 * tau + 1.0);
    for ((v, &yi), &m) in t.iter_mut().zip(y).zip(mask) {
        if m {
            *v = a * yi + b * *v;
        }
    }
}
