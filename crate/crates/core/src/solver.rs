//! Outlier pursuit with a primal-dual inner solver.
//!
//! The pipeline stabilizes the noisy image with the GAT, alternates an
//! l0-constrained outlier update (z-step) with a masked TV / plug-in prior
//! restoration (x-step), and maps the result back through the exact unbiased
//! inverse.
//!
//! The x-step solves
//!
//! ```text
//! min_w ||w_Ω − ỹ_Ω||² + λ1 ||∇w||_{2,1} + λ2 h(w)
//! ```
//!
//! with Chambolle-Pock iterations
//!
//! ```text
//! u ← prox_{ρg*}(u + ρ K s)
//! w ← prox_{τf}(w − τ Kᵀ u)
//! s ← s + θ (w_new − w)          (CpVariant::AsPrinted, s⁰ = 0)
//! s ← w_new + θ (w_new − w)      (CpVariant::Standard,  s⁰ = w⁰)
//! ```
//!
//! In the `AsPrinted` variant `s^k = θ(w^k − w^0)`, so the dual step never
//! sees an extrapolated primal and the fixed point minimizes
//! `f(w) + g(K(w − w⁰))`. That only matches the x-step problem when
//! `∇w⁰ = 0`; warm starts stall. `Standard` is the default.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::filters::{impulse_filter, init_outlier_field};
use crate::image::{check_dims, psnr, Image, PixelMask};
use crate::noise::ImpulseType;
use crate::operators::{
    div_into, grad, grad_into, prox_conjugate_stacked, prox_data_in_place, tv_norm, DualVariable,
    GradField, RegularizerConfig,
};
use crate::vst::{build_exact_unbiased_lut, gat_forward, gat_value, igat_exact_unbiased, GatLut};

/// Update rule for the extrapolation variable `s`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CpVariant {
    /// `s⁰ = 0`, `s ← s + θ(w_new − w)`.
    AsPrinted,
    /// Over-relaxed primal `s⁰ = w⁰`, `s ← w_new + θ(w_new − w)`.
    #[default]
    Standard,
}

/// Value kept on the selected outlier support.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZRule {
    /// `z_i = q_i`, the exact minimizer.
    #[default]
    Signed,
    /// `z_i = |q_i|`; kept for comparison only.
    Absolute,
}

/// Image the impulse detector runs on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionDomain {
    #[default]
    Stabilized,
    Raw,
}

/// Starting point `x̃⁰` of the outer loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialEstimate {
    #[default]
    Zero,
    Observed,
    /// The impulse filter applied to the stabilized image.
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerOptions {
    pub iterations: usize,
    pub variant: CpVariant,
    /// Stop once `||w_new − w|| / ||w|| < tol`.
    pub early_stop: Option<f64>,
    pub log_objective: bool,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            variant: CpVariant::Standard,
            early_stop: None,
            log_objective: false,
        }
    }
}

pub const DEFAULT_RHO: f64 = 0.35;
pub const DEFAULT_LAMBDA: f64 = 2.0;
pub const DEFAULT_MU_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// l0 budget; `None` estimates it from the initial outlier field.
    pub mu: Option<usize>,
    pub outer_iters: usize,
    pub inner: InnerOptions,
    pub reg: RegularizerConfig,
    pub convergence_log: bool,
    pub z_rule: ZRule,
    pub detection: DetectionDomain,
    pub initial_estimate: InitialEstimate,
    pub mu_threshold: f64,
}

impl SolverParams {
    /// TV-only defaults: one outer round for salt-and-pepper, ten for
    /// random-valued impulses, 500 inner iterations.
    pub fn for_impulse(impulse_type: ImpulseType) -> Self {
        Self::with_reg(
            impulse_type,
            RegularizerConfig::tv(DEFAULT_LAMBDA, DEFAULT_RHO).expect("valid defaults"),
        )
    }

    pub fn with_reg(impulse_type: ImpulseType, reg: RegularizerConfig) -> Self {
        Self {
            mu: None,
            outer_iters: match impulse_type {
                ImpulseType::SaltPepper => 1,
                ImpulseType::RandomValued => 10,
            },
            inner: InnerOptions::default(),
            reg,
            convergence_log: false,
            z_rule: ZRule::Signed,
            detection: DetectionDomain::Stabilized,
            initial_estimate: InitialEstimate::Zero,
            mu_threshold: DEFAULT_MU_THRESHOLD,
        }
    }

    pub fn validate(&self, pixels: usize) -> Result<()> {
        if self.outer_iters == 0 || self.inner.iterations == 0 {
            return invalid("outer and inner iteration counts must be >= 1");
        }
        if let Some(mu) = self.mu {
            if mu > pixels {
                return invalid(format!("mu = {mu} exceeds the pixel count {pixels}"));
            }
        }
        if !(self.mu_threshold >= 0.0) {
            return invalid("mu threshold must be >= 0");
        }
        Ok(())
    }
}

/// Indices of the `mu` largest `|q_i|`, ties broken by lowest index.
fn top_magnitudes(q: &[f64], mu: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    if mu == 0 {
        return Vec::new();
    }
    if mu < q.len() {
        idx.select_nth_unstable_by(mu - 1, |&a, &b| {
            q[b].abs().total_cmp(&q[a].abs()).then(a.cmp(&b))
        });
        idx.truncate(mu);
    }
    idx
}

pub fn z_step(y_tilde: &Image, x_tilde: &Image, mu: usize) -> Result<Image> {
    z_step_with_rule(y_tilde, x_tilde, mu, ZRule::Signed)
}

/// Keeps `q = ỹ − x̃` on its `mu` largest-magnitude entries and zeroes the rest.
pub fn z_step_with_rule(y_tilde: &Image, x_tilde: &Image, mu: usize, rule: ZRule) -> Result<Image> {
    y_tilde.check_same_dims(x_tilde)?;
    if mu > y_tilde.len() {
        return invalid(format!("mu = {mu} exceeds the pixel count {}", y_tilde.len()));
    }
    let q: Vec<f64> = y_tilde
        .data()
        .iter()
        .zip(x_tilde.data())
        .map(|(y, x)| y - x)
        .collect();
    let mut z = vec![0.0; q.len()];
    for i in top_magnitudes(&q, mu) {
        z[i] = match rule {
            ZRule::Signed => q[i],
            ZRule::Absolute => q[i].abs(),
        };
    }
    Ok(y_tilde.with_data(z))
}

/// `||w_Ω − ỹ_Ω||² + λ1 TV(w)`. The plug-in prior has no closed-form value
/// and is left out.
pub fn x_step_objective(w: &Image, y_tilde: &Image, omega: &PixelMask, lambda1: f64) -> f64 {
    let data: f64 = w
        .data()
        .iter()
        .zip(y_tilde.data())
        .zip(omega.bits())
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum();
    data + lambda1 * tv_norm(w)
}

/// `||x − ỹ + z||² + λ1 TV(x)`.
pub fn outlier_objective(x: &Image, y_tilde: &Image, z: &Image, lambda1: f64) -> f64 {
    let data: f64 = x
        .data()
        .iter()
        .zip(y_tilde.data())
        .zip(z.data())
        .map(|((a, b), c)| (a - b + c).powi(2))
        .sum();
    data + lambda1 * tv_norm(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpOutcome {
    pub w: Image,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

/// Runs the primal-dual x-step from `x_init`.
pub fn cp_x_step(
    y_tilde: &Image,
    omega: &PixelMask,
    x_init: &Image,
    reg: &RegularizerConfig,
    opts: &InnerOptions,
) -> Result<CpOutcome> {
    y_tilde.check_same_dims(x_init)?;
    check_dims(y_tilde.width(), y_tilde.height(), omega.width(), omega.height())?;
    if opts.iterations == 0 {
        return invalid("inner iteration count must be >= 1");
    }
    let (w_px, h_px) = (y_tilde.width(), y_tilde.height());
    let n = y_tilde.len();
    let (rho, tau, theta) = (reg.rho(), reg.tau(), reg.theta());
    let identity = reg.has_identity_branch();

    let mut w = x_init.data().to_vec();
    // u⁰ = K w⁰
    let mut u = DualVariable {
        grad_part: grad(x_init),
        id_part: identity.then(|| x_init.clone()),
    };
    let mut s = match opts.variant {
        CpVariant::AsPrinted => vec![0.0; n],
        CpVariant::Standard => w.clone(),
    };
    let mut ks = GradField::zeros(w_px, h_px);
    let mut ktu = vec![0.0; n];
    let mut w_new = vec![0.0; n];
    let mut trace = Vec::new();
    let mut done = 0;

    for _ in 0..opts.iterations {
        grad_into(&s, w_px, h_px, &mut ks.gx, &mut ks.gy);
        let mut arg = u;
        for (a, b) in arg.grad_part.gx.iter_mut().zip(&ks.gx) {
            *a += rho * b;
        }
        for (a, b) in arg.grad_part.gy.iter_mut().zip(&ks.gy) {
            *a += rho * b;
        }
        if let Some(part) = arg.id_part.take() {
            let moved = part
                .data()
                .iter()
                .zip(&s)
                .map(|(a, b)| a + rho * b)
                .collect();
            arg.id_part = Some(part.with_data(moved));
        }
        u = prox_conjugate_stacked(&arg, reg)?;

        // Kᵀu = −div(u_grad) + u_id
        div_into(&u.grad_part.gx, &u.grad_part.gy, w_px, h_px, &mut ktu);
        for v in ktu.iter_mut() {
            *v = -*v;
        }
        if let Some(part) = &u.id_part {
            for (a, b) in ktu.iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        for ((dst, &wi), &k) in w_new.iter_mut().zip(&w).zip(&ktu) {
            *dst = wi - tau * k;
        }
        prox_data_in_place(&mut w_new, y_tilde.data(), omega.bits(), tau);

        match opts.variant {
            CpVariant::AsPrinted => {
                for ((si, &a), &b) in s.iter_mut().zip(&w_new).zip(&w) {
                    *si += theta * (a - b);
                }
            }
            CpVariant::Standard => {
                for ((si, &a), &b) in s.iter_mut().zip(&w_new).zip(&w) {
                    *si = a + theta * (a - b);
                }
            }
        }
        let change = if opts.early_stop.is_some() {
            let num: f64 = w_new.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum();
            let den: f64 = w.iter().map(|a| a * a).sum();
            (num / den.max(f64::MIN_POSITIVE)).sqrt()
        } else {
            f64::INFINITY
        };
        std::mem::swap(&mut w, &mut w_new);
        done += 1;
        if opts.log_objective {
            let cur = y_tilde.with_data(w.clone());
            trace.push(x_step_objective(&cur, y_tilde, omega, reg.lambda1()));
        }
        if let Some(tol) = opts.early_stop {
            if change < tol {
                break;
            }
        }
    }
    Ok(CpOutcome {
        w: y_tilde.with_data(w),
        iterations: done,
        objective_trace: trace,
    })
}

/// `mu` from the initial outlier field: the override if given, otherwise the
/// number of entries above `threshold`.
pub fn estimate_mu(z0: &Image, override_mu: Option<usize>, threshold: f64) -> usize {
    if let Some(mu) = override_mu {
        return mu;
    }
    z0.data().iter().filter(|&&v| v > threshold).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AopOutcome {
    pub x_tilde: Image,
    pub z: Image,
    pub omega: PixelMask,
    pub mu: usize,
    /// Outlier objective after each outer round.
    pub objective_trace: Vec<f64>,
    /// PSNR against the reference after each outer round, when one is given.
    pub psnr_trace: Vec<f64>,
    /// Support size of `z` after each z-step.
    pub support_trace: Vec<usize>,
    /// Inner objective traces, one per round, when logging is on.
    pub inner_traces: Vec<Vec<f64>>,
}

/// Outer loop seeded from the impulse filter applied to `y_tilde`.
pub fn aop_loop(y_tilde: &Image, params: &SolverParams, impulse_type: ImpulseType) -> Result<AopOutcome> {
    let z0 = init_outlier_field(y_tilde, impulse_type)?;
    let x0 = initial_estimate(y_tilde, params.initial_estimate, impulse_type)?;
    aop_loop_from(y_tilde, &z0, &x0, params, None)
}

fn initial_estimate(y_tilde: &Image, which: InitialEstimate, impulse_type: ImpulseType) -> Result<Image> {
    Ok(match which {
        InitialEstimate::Zero => y_tilde.map(|_| 0.0),
        InitialEstimate::Observed => y_tilde.clone(),
        InitialEstimate::Filtered => impulse_filter(y_tilde, impulse_type)?,
    })
}

/// Outer loop with an explicit initial outlier field `z0` and start `x0`.
///
/// Ω⁰ excludes the `mu` largest entries of `z0`. `reference`, when given,
/// is a stabilized-domain clean image used for the PSNR trace.
pub fn aop_loop_from(
    y_tilde: &Image,
    z0: &Image,
    x0: &Image,
    params: &SolverParams,
    reference: Option<&Image>,
) -> Result<AopOutcome> {
    y_tilde.check_same_dims(z0)?;
    y_tilde.check_same_dims(x0)?;
    params.validate(y_tilde.len())?;
    let mu = estimate_mu(z0, params.mu, params.mu_threshold).min(y_tilde.len());
    let zeros = y_tilde.map(|_| 0.0);
    let mut z = z_step(z0, &zeros, mu)?;
    let mut x = x0.clone();
    let mut out = AopOutcome {
        x_tilde: x.clone(),
        z: z.clone(),
        omega: PixelMask::from_zero_entries(&z),
        mu,
        objective_trace: Vec::new(),
        psnr_trace: Vec::new(),
        support_trace: Vec::new(),
        inner_traces: Vec::new(),
    };
    let inner = InnerOptions {
        log_objective: params.inner.log_objective || params.convergence_log,
        ..params.inner.clone()
    };
    for t in 0..params.outer_iters {
        let omega = PixelMask::from_zero_entries(&z);
        let step = cp_x_step(y_tilde, &omega, &x, &params.reg, &inner)?;
        x = step.w;
        z = z_step_with_rule(y_tilde, &x, mu, params.z_rule)?;
        let support = z.data().iter().filter(|&&v| v != 0.0).count();
        let objective = outlier_objective(&x, y_tilde, &z, params.reg.lambda1());
        out.objective_trace.push(objective);
        out.support_trace.push(support);
        if let Some(r) = reference {
            out.psnr_trace.push(psnr(r, &x, r.peak())?);
        }
        if inner.log_objective {
            out.inner_traces.push(step.objective_trace);
        }
        if params.convergence_log {
            log::info!(
                "outer {}: objective {objective:.6}, |z|_0 = {support}, inner iterations {}",
                t + 1,
                step.iterations
            );
        }
        out.omega = omega;
    }
    out.x_tilde = x;
    out.z = z;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MindxOutput {
    pub image: Image,
    pub stabilized: Image,
    pub aop: AopOutcome,
}

/// Default lookup-table range for a given peak.
pub fn default_lut_x_max(peak: f64) -> f64 {
    1.5 * peak
}

/// Full pipeline: GAT, outlier pursuit, exact unbiased inverse.
pub fn mindx_denoise(y: &Image, sigma: f64, params: &SolverParams, impulse_type: ImpulseType) -> Result<Image> {
    let lut = build_exact_unbiased_lut(sigma, default_lut_x_max(y.peak()))?;
    Ok(mindx_denoise_with(y, sigma, params, impulse_type, &lut, None)?.image)
}

/// Pipeline with a prebuilt table. `clean`, when given, is the
/// intensity-domain ground truth used for the stabilized PSNR trace.
pub fn mindx_denoise_with(
    y: &Image,
    sigma: f64,
    params: &SolverParams,
    impulse_type: ImpulseType,
    lut: &GatLut,
    clean: Option<&Image>,
) -> Result<MindxOutput> {
    if (lut.sigma() - sigma).abs() > 1e-12 * sigma.max(1.0) {
        return invalid(format!(
            "lookup table built for sigma {} but pipeline uses {sigma}",
            lut.sigma()
        ));
    }
    let y_tilde = gat_forward(y, sigma)?;
    let z0 = match params.detection {
        DetectionDomain::Stabilized => init_outlier_field(&y_tilde, impulse_type)?,
        DetectionDomain::Raw => init_outlier_field(y, impulse_type)?,
    };
    let x0 = initial_estimate(&y_tilde, params.initial_estimate, impulse_type)?;
    let reference = match clean {
        Some(c) => {
            y.check_same_dims(c)?;
            Some(c.map(|v| gat_value(v, sigma)).with_peak(y_tilde.peak())?)
        }
        None => None,
    };
    let aop = aop_loop_from(&y_tilde, &z0, &x0, params, reference.as_ref())?;
    let image = igat_exact_unbiased(&aop.x_tilde, lut).with_peak(y.peak())?;
    Ok(MindxOutput {
        image,
        stabilized: y_tilde,
        aop,
    })
}
