//! Synthetic mixed impulse + Poisson + Gaussian corruption.
//!
//! Every pixel first draws its impulse membership. Impulse pixels are
//! replaced outright; the remaining pixels receive `Poisson(x) + N(0, σ²)`.
//! Values are not clipped, so Gaussian noise can push pixels below zero or
//! above the peak.
//!
//! The random stream is ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `seed_from_u64`, consumed strictly in row-major pixel order:
//!
//! 1. one uniform `f64` for Bernoulli(r) membership (skipped in exact-count mode),
//! 2. impulse pixels: one `bool` (salt-and-pepper) or one uniform `f64` (random-valued),
//! 3. other pixels: one Poisson draw when `x > 0`, then one normal draw when `σ > 0`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Image, PixelMask};

/// Generator used for all synthetic noise.
pub type NoiseRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpulseType {
    SaltPepper,
    RandomValued,
}

impl std::fmt::Display for ImpulseType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ImpulseType::SaltPepper => f.write_str("salt-pepper"),
            ImpulseType::RandomValued => f.write_str("random-valued"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub peak: f64,
    /// Gaussian standard deviation in intensity units.
    pub sigma: f64,
    /// Fraction of pixels hit by impulses.
    pub impulse_ratio: f64,
    pub impulse_type: ImpulseType,
    pub seed: u64,
    /// Corrupt exactly `floor(r N)` pixels instead of independent Bernoulli draws.
    #[serde(default)]
    pub exact_count: bool,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return invalid(format!("noise peak must be positive, got {}", self.peak));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.impulse_ratio) {
            return invalid(format!(
                "impulse ratio must lie in [0, 1], got {}",
                self.impulse_ratio
            ));
        }
        Ok(())
    }
}

/// Applies the mixed noise model to `clean`.
///
/// Returns the noisy image and the ground-truth mask of impulse-free pixels.
pub fn corrupt(clean: &Image, spec: &NoiseSpec) -> Result<(Image, PixelMask)> {
    spec.validate()?;
    if (clean.peak() - spec.peak).abs() > 1e-12 * spec.peak {
        return invalid(format!(
            "image peak {} does not match noise peak {}",
            clean.peak(),
            spec.peak
        ));
    }
    if let Some((i, v)) = clean
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=spec.peak).contains(&v))
    {
        return invalid(format!(
            "clean pixel {i} = {v} lies outside [0, {}]",
            spec.peak
        ));
    }

    let n = clean.len();
    let mut rng = NoiseRng::seed_from_u64(spec.seed);
    let preselected = if spec.exact_count {
        let m = (spec.impulse_ratio * n as f64).floor() as usize;
        let mut hit = vec![false; n];
        for i in index::sample(&mut rng, n, m.min(n)).iter() {
            hit[i] = true;
        }
        Some(hit)
    } else {
        None
    };
    let gauss = if spec.sigma > 0.0 {
        Some(Normal::new(0.0, spec.sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut noisy = Vec::with_capacity(n);
    let mut trusted = Vec::with_capacity(n);
    for (i, &x) in clean.data().iter().enumerate() {
        let is_impulse = match &preselected {
            Some(hit) => hit[i],
            None => rng.random::<f64>() < spec.impulse_ratio,
        };
        if is_impulse {
            let v = match spec.impulse_type {
                ImpulseType::SaltPepper => {
                    if rng.random_bool(0.5) {
                        spec.peak
                    } else {
                        0.0
                    }
                }
                ImpulseType::RandomValued => rng.random::<f64>() * spec.peak,
            };
            noisy.push(v);
            trusted.push(false);
        } else {
            let counts = if x > 0.0 {
                Poisson::new(x).expect("positive rate").sample(&mut rng)
            } else {
                0.0
            };
            let g = gauss.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            noisy.push(counts + g);
            trusted.push(true);
        }
    }
    Ok((
        clean.with_data(noisy),
        PixelMask::new(clean.width(), clean.height(), trusted)?,
    ))
}

/// Linearly rescales so that `img.peak()` maps to `new_peak`.
pub fn rescale_to_peak(img: &Image, new_peak: f64) -> Result<Image> {
    if !(new_peak > 0.0 && new_peak.is_finite()) {
        return invalid(format!("new peak must be positive, got {new_peak}"));
    }
    if new_peak == img.peak() {
        return Ok(img.clone());
    }
    let scale = new_peak / img.peak();
    img.map(|v| v * scale).with_peak(new_peak)
}
