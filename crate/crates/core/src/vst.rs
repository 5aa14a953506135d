//! Generalized Anscombe transform and its inverses.
//!
//! The exact unbiased inverse is tabulated: for a grid of clean intensities
//! `x` we compute `E[GAT(y)]` with `y ~ Poisson(x) + N(0, σ²)`, then invert
//! that monotone curve by piecewise-linear interpolation.
//!
//! The expectation is evaluated as `Σ_k P(k; x) I_k` where
//! `I_k = ∫ GAT(y) φ_σ(y − k) dy` does not depend on `x`, so each `I_k` is
//! integrated once per table.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::image::Image;

const THREE_EIGHTHS: f64 = 0.375;

/// Forward GAT of a single value.
#[inline]
pub fn gat_value(y: f64, sigma: f64) -> f64 {
    let arg = y + THREE_EIGHTHS + sigma * sigma;
    if arg > 0.0 {
        2.0 * arg.sqrt()
    } else {
        0.0
    }
}

/// Algebraic inverse of [`gat_value`], floored at zero.
#[inline]
pub fn gat_inverse_value(v: f64, sigma: f64) -> f64 {
    let x = (v / 2.0).powi(2) - THREE_EIGHTHS - sigma * sigma;
    x.max(0.0)
}

pub fn gat_forward(img: &Image, sigma: f64) -> Result<Image> {
    check_sigma(sigma)?;
    let peak = gat_value(img.peak(), sigma);
    img.map(|y| gat_value(y, sigma)).with_peak(peak)
}

/// Algebraic inverse; the result keeps the stabilized image's peak, callers
/// restore the intensity-domain peak.
pub fn gat_inverse_algebraic(img: &Image, sigma: f64) -> Result<Image> {
    check_sigma(sigma)?;
    Ok(img.map(|v| gat_inverse_value(v, sigma)))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        invalid(format!("sigma must be non-negative, got {sigma}"))
    }
}

/// Clean-value sampling used to build a [`GatLut`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LutGrid {
    /// Number of log-spaced clean values (zero is always prepended).
    pub points: usize,
    /// Smallest positive clean value.
    pub min_clean: f64,
}

impl Default for LutGrid {
    fn default() -> Self {
        Self {
            points: 512,
            min_clean: 1e-3,
        }
    }
}

impl LutGrid {
    pub fn clean_values(&self, x_max: f64) -> Vec<f64> {
        let mut xs = Vec::with_capacity(self.points + 1);
        xs.push(0.0);
        if self.points == 1 {
            xs.push(x_max);
            return xs;
        }
        let (l0, l1) = (self.min_clean.ln(), x_max.ln());
        for i in 0..self.points {
            let t = i as f64 / (self.points - 1) as f64;
            xs.push((l0 + t * (l1 - l0)).exp());
        }
        // pin the endpoint exactly
        *xs.last_mut().unwrap() = x_max;
        xs
    }
}

/// Lookup table mapping stabilized values back to exact-unbiased clean values.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLut {
    sigma: f64,
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl GatLut {
    pub fn from_parts(sigma: f64, grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        check_sigma(sigma)?;
        if grid.len() != values.len() || grid.len() < 2 {
            return invalid(format!(
                "lookup table needs matching arrays of length >= 2, got {} and {}",
                grid.len(),
                values.len()
            ));
        }
        if grid.iter().chain(&values).any(|v| !v.is_finite()) {
            return invalid("lookup table contains non-finite entries");
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("lookup table grid must be strictly ascending");
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return invalid("lookup table values must be non-decreasing");
        }
        Ok(Self {
            sigma,
            grid,
            values,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid_min(&self) -> f64 {
        self.grid[0]
    }

    pub fn grid_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Largest clean value covered by the table.
    pub fn x_max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Exact-unbiased estimate for one stabilized value.
    pub fn invert(&self, v: f64) -> f64 {
        if v < self.grid_min() {
            return 0.0;
        }
        if v > self.grid_max() {
            // Algebraic inverse shifted to meet the last tabulated value, so the
            // map stays continuous and nondecreasing past the table.
            let top = *self.values.last().unwrap();
            return top + gat_inverse_value(v, self.sigma)
                - gat_inverse_value(self.grid_max(), self.sigma);
        }
        let j = self.grid.partition_point(|&g| g <= v);
        if j == self.grid.len() {
            return *self.values.last().unwrap();
        }
        let (g0, g1) = (self.grid[j - 1], self.grid[j]);
        let (v0, v1) = (self.values[j - 1], self.values[j]);
        if v == g0 {
            return v0;
        }
        v0 + (v - g0) / (g1 - g0) * (v1 - v0)
    }

    /// `E[GAT(y)]` interpolated from the table at a clean value inside its range.
    pub fn forward_expectation(&self, x: f64) -> f64 {
        let j = self.values.partition_point(|&c| c <= x).clamp(1, self.values.len() - 1);
        let (c0, c1) = (self.values[j - 1], self.values[j]);
        let (g0, g1) = (self.grid[j - 1], self.grid[j]);
        g0 + (x - c0) / (c1 - c0) * (g1 - g0)
    }
}

/// Applies the exact unbiased inverse pixelwise.
pub fn igat_exact_unbiased(img: &Image, lut: &GatLut) -> Image {
    img.map(|v| lut.invert(v))
}

pub fn build_exact_unbiased_lut(sigma: f64, x_max: f64) -> Result<GatLut> {
    build_exact_unbiased_lut_with(sigma, x_max, LutGrid::default())
}

pub fn build_exact_unbiased_lut_with(sigma: f64, x_max: f64, grid: LutGrid) -> Result<GatLut> {
    check_sigma(sigma)?;
    if !(x_max > 0.0 && x_max.is_finite()) {
        return invalid(format!("x_max must be positive, got {x_max}"));
    }
    if grid.points == 0 || !(grid.min_clean > 0.0 && grid.min_clean < x_max) {
        return invalid(format!("invalid lookup grid {grid:?} for x_max {x_max}"));
    }
    let clean = grid.clean_values(x_max);
    let k_top = poisson_truncation(x_max);
    let integrals: Vec<f64> = (0..=k_top)
        .into_par_iter()
        .map(|k| gat_expectation_given_count(k as f64, sigma))
        .collect::<Result<_>>()?;
    let log_fact = log_factorials(k_top);

    let stabilized: Vec<f64> = clean
        .par_iter()
        .map(|&x| expectation_from_integrals(x, &integrals, &log_fact))
        .collect();
    if let Some(w) = stabilized.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Quadrature(format!(
            "stabilized expectation curve not strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    GatLut::from_parts(sigma, stabilized, clean)
}

/// Poisson sum cut-off `ceil(x + 10 sqrt(x) + 30)`.
pub fn poisson_truncation(x: f64) -> usize {
    (x + 10.0 * x.sqrt() + 30.0).ceil() as usize
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn expectation_from_integrals(x: f64, integrals: &[f64], log_fact: &[f64]) -> f64 {
    if x == 0.0 {
        return integrals[0];
    }
    let k_max = poisson_truncation(x).min(integrals.len() - 1);
    let ln_x = x.ln();
    let mut acc = 0.0;
    for k in 0..=k_max {
        let ln_p = k as f64 * ln_x - x - log_fact[k];
        acc += ln_p.exp() * integrals[k];
    }
    acc
}

/// `E[GAT(y)]` for `y = k + N(0, σ²)`, integrated over `[k − 8σ, k + 8σ]`.
///
/// Uses the substitution `y = t0 + v²` (with `t0 = −3/8 − σ²`) to remove the
/// square-root kink at the threshold, then composite Simpson with doubling.
pub fn gat_expectation_given_count(k: f64, sigma: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(gat_value(k, 0.0));
    }
    let t0 = -THREE_EIGHTHS - sigma * sigma;
    let (a, b) = (k - 8.0 * sigma, k + 8.0 * sigma);
    if b <= t0 {
        return Ok(0.0);
    }
    let lo = a.max(t0);
    let (v0, v1) = ((lo - t0).sqrt(), (b - t0).sqrt());
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |v: f64| {
        let y = t0 + v * v;
        let d = (y - k) / sigma;
        4.0 * v * v * norm * (-0.5 * d * d).exp()
    };
    simpson_until_converged(f, v0, v1)
}

fn simpson_until_converged(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    const START: usize = 64;
    const CAP: usize = 1 << 16;
    let simpson = |n: usize| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let mut n = START;
    let mut prev = simpson(n);
    let mut rel = f64::INFINITY;
    while n < CAP {
        n *= 2;
        let cur = simpson(n);
        rel = (cur - prev).abs() / cur.abs().max(f64::MIN_POSITIVE);
        prev = cur;
        if rel <= 1e-12 {
            return Ok(cur);
        }
    }
    if rel <= 1e-8 {
        Ok(prev)
    } else {
        Err(Error::Quadrature(format!(
            "relative change {rel:e} after {n} panels on [{a}, {b}]"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    fn mc_gat_mean_se(x: f64, sigma: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pois = (x > 0.0).then(|| Poisson::new(x).unwrap());
        let gauss = (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap());
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let y = pois.as_ref().map_or(0.0, |p| p.sample(&mut rng))
                + gauss.as_ref().map_or(0.0, |g| g.sample(&mut rng));
            let v = gat_value(y, sigma);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn forward_examples() {
        assert!((gat_value(0.0, 0.0) - 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(gat_value(-1.0, 0.0), 0.0);
        assert_eq!(gat_value(20.0, 2.0), 2.0 * 24.375f64.sqrt());
        let img = Image::new(2, 1, vec![0.0, 20.0], 20.0).unwrap();
        let out = gat_forward(&img, 2.0).unwrap();
        assert_eq!(out.peak(), gat_value(20.0, 2.0));
        assert!(gat_forward(&img, -1.0).is_err());
    }

    #[test]
    fn algebraic_inverse_examples() {
        assert_eq!(gat_inverse_value(2.0 * 0.375f64.sqrt(), 0.0), 0.0);
        assert_eq!(gat_inverse_value(0.0, 1.0), 0.0);
        let v = gat_value(100.0, 1.0);
        assert!((gat_inverse_value(v, 1.0) - 100.0).abs() < 1e-12 * 100.0);
    }

    #[test]
    fn algebraic_round_trip_above_threshold() {
        for &sigma in &[0.0, 0.5, 3.0] {
            let t = -THREE_EIGHTHS - sigma * sigma;
            for i in 1..200 {
                let y = t + 0.37 * i as f64;
                if y < 0.0 {
                    // floor at zero makes the round trip one-sided below 0
                    continue;
                }
                let back = gat_inverse_value(gat_value(y, sigma), sigma);
                assert!((back - y).abs() <= 1e-12 * y.abs().max(1.0), "{y} -> {back}");
            }
        }
    }

    #[test]
    fn forward_strictly_increasing_above_threshold() {
        let sigma = 1.5;
        let t = -THREE_EIGHTHS - sigma * sigma;
        let vals: Vec<f64> = (1..500).map(|i| gat_value(t + 0.05 * i as f64, sigma)).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn degenerate_zero_clean_value() {
        let lut = build_exact_unbiased_lut(0.0, 30.0).unwrap();
        assert!((lut.grid_min() - 2.0 * 0.375f64.sqrt()).abs() < 1e-15);
        assert_eq!(lut.values()[0], 0.0);
    }

    #[test]
    fn interpolation_identity_and_boundaries() {
        let lut = build_exact_unbiased_lut(1.0, 30.0).unwrap();
        for j in [0, 1, 17, 200, lut.grid().len() - 1] {
            assert_eq!(lut.invert(lut.grid()[j]), lut.values()[j]);
        }
        assert_eq!(lut.invert(lut.grid_min() - 1e-9), 0.0);
        assert_eq!(lut.invert(-5.0), 0.0);
        let above = lut.grid_max() + 3.0;
        let shift = gat_inverse_value(above, 1.0) - gat_inverse_value(lut.grid_max(), 1.0);
        assert!((lut.invert(above) - lut.x_max() - shift).abs() < 1e-9);
        assert!((lut.invert(lut.grid_max() + 1e-12) - lut.x_max()).abs() < 1e-9);
        let img = Image::new(3, 1, vec![0.0, lut.grid()[5], lut.grid()[9]], 9.0).unwrap();
        let out = igat_exact_unbiased(&img, &lut);
        assert_eq!(out.data(), &[0.0, lut.values()[5], lut.values()[9]]);
    }

    #[test]
    fn invert_is_nondecreasing() {
        let lut = build_exact_unbiased_lut(2.0, 40.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..4000 {
            let v = -1.0 + i as f64 * 0.005;
            let x = lut.invert(v);
            assert!(x >= prev, "at {v}");
            prev = x;
        }
    }

    #[test]
    fn pure_poisson_agrees_with_algebraic_inverse_at_high_counts() {
        let lut = build_exact_unbiased_lut(0.0, 300.0).unwrap();
        for &x in &[100.0, 150.0, 200.0] {
            let e = lut.forward_expectation(x);
            let alg = gat_inverse_value(e, 0.0);
            assert!((lut.invert(e) - x).abs() / x < 1e-3);
            assert!((alg - x).abs() / x < 5e-3, "x={x}: algebraic {alg}");
        }
        // Monte-Carlo oracle for the tabulated expectation at x = 100.
        let (mean, se) = mc_gat_mean_se(100.0, 0.0, 10_000_000, 11);
        let e = lut.forward_expectation(100.0);
        assert!((mean - e).abs() <= 3.0 * se, "mc {mean} ± {se}, lut {e}");
        assert!((gat_inverse_value(mean, 0.0) - 100.0).abs() / 100.0 < 5e-3);
    }

    #[test]
    fn lut_matches_monte_carlo_sigma_one() {
        let lut = build_exact_unbiased_lut(1.0, 30.0).unwrap();
        let e = lut.forward_expectation(5.0);
        let (mean, se) = mc_gat_mean_se(5.0, 1.0, 1_000_000, 5);
        assert!((mean - e).abs() <= 3.0 * se, "mc {mean} ± {se}, lut {e}");
    }

    #[test]
    fn round_trip_unbiased_sigma_one() {
        let lut = build_exact_unbiased_lut(1.0, 30.0).unwrap();
        let (mean, _) = mc_gat_mean_se(10.0, 1.0, 1_000_000, 3);
        let est = lut.invert(mean);
        assert!((est - 10.0).abs() / 10.0 < 0.02, "{est}");
    }

    #[test]
    fn lut_below_algebraic_for_small_and_converges_for_large() {
        let lut = build_exact_unbiased_lut(0.0, 300.0).unwrap();
        // For a given stabilized value, the exact-unbiased estimate exceeds the
        // algebraic one at low counts (the algebraic inverse is biased low).
        for &x in &[1.0, 3.0, 8.0] {
            let e = lut.forward_expectation(x);
            assert!(gat_inverse_value(e, 0.0) < lut.invert(e));
        }
        let e = lut.forward_expectation(200.0);
        let gap = (gat_inverse_value(e, 0.0) - lut.invert(e)).abs() / 200.0;
        assert!(gap < 5e-3, "gap {gap}");
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(build_exact_unbiased_lut(-1.0, 10.0).is_err());
        assert!(build_exact_unbiased_lut(1.0, 0.0).is_err());
        assert!(GatLut::from_parts(1.0, vec![1.0], vec![0.0]).is_err());
        assert!(GatLut::from_parts(1.0, vec![1.0, 1.0], vec![0.0, 1.0]).is_err());
        assert!(GatLut::from_parts(1.0, vec![1.0, 2.0], vec![1.0, 0.0]).is_err());
    }
}
