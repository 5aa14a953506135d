//! Adaptive median (AMF) and adaptive center-weighted median (ACWMF) filters.
//!
//! Both are used to seed the outlier field and as standalone baselines.
//! Borders use reflective padding without edge repetition
//! (`... c b | a b c ...`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::noise::ImpulseType;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmfParams {
    pub initial_window: usize,
    pub max_window: usize,
}

impl Default for AmfParams {
    fn default() -> Self {
        Self {
            initial_window: 3,
            max_window: 19,
        }
    }
}

impl AmfParams {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.initial_window, self.max_window);
        if a < 3 || a > b || a % 2 == 0 || b % 2 == 0 {
            return invalid(format!(
                "AMF windows must be odd with 3 <= initial <= max, got {a}..{b}"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcwmfParams {
    pub window: usize,
    /// Extra center weight step; weights are `2k + 1` for `k = 0..thresholds.len()`.
    pub center_weight: usize,
    /// `δ_k` in intensity units.
    pub thresholds: [f64; 4],
    /// MAD multiplier `s`.
    pub s: f64,
}

impl AcwmfParams {
    /// Canonical parameter set with thresholds rescaled from a 255 range to `peak`.
    pub fn for_peak(peak: f64) -> Self {
        let scale = peak / 255.0;
        Self {
            window: 3,
            center_weight: 7,
            thresholds: [40.0 * scale, 25.0 * scale, 10.0 * scale, 5.0 * scale],
            s: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return invalid(format!("ACWMF window must be odd >= 3, got {}", self.window));
        }
        if self.center_weight == 0 || self.center_weight.is_multiple_of(2) {
            return invalid(format!(
                "ACWMF center weight must be a positive odd integer, got {}",
                self.center_weight
            ));
        }
        if self.thresholds.windows(2).any(|w| w[1] > w[0]) {
            return invalid("ACWMF thresholds must be non-increasing");
        }
        if !(self.s >= 0.0) {
            return invalid(format!("ACWMF MAD multiplier must be >= 0, got {}", self.s));
        }
        Ok(())
    }
}

/// Reflects an out-of-range coordinate back into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

fn gather_window(img: &Image, row: usize, col: usize, radius: usize, buf: &mut Vec<f64>) {
    buf.clear();
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    for dr in -r..=r {
        let rr = reflect(row as isize + dr, h);
        for dc in -r..=r {
            let cc = reflect(col as isize + dc, w);
            buf.push(img.get(rr, cc));
        }
    }
}

fn sort_values(buf: &mut [f64]) {
    buf.sort_unstable_by(f64::total_cmp);
}

fn median_sorted(sorted: &[f64]) -> f64 {
    sorted[sorted.len() / 2]
}

fn par_rows(img: &Image, f: impl Fn(usize, usize, &mut Vec<f64>) -> f64 + Sync) -> Image {
    let w = img.width();
    let mut out = vec![0.0; img.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(row, dst)| {
        let mut buf = Vec::new();
        for (col, d) in dst.iter_mut().enumerate() {
            *d = f(row, col, &mut buf);
        }
    });
    img.with_data(out)
}

pub fn amf(img: &Image, params: &AmfParams) -> Result<Image> {
    params.validate()?;
    Ok(par_rows(img, |row, col, buf| {
        let center = img.get(row, col);
        let mut size = params.initial_window;
        loop {
            gather_window(img, row, col, size / 2, buf);
            sort_values(buf);
            let (lo, hi, med) = (buf[0], buf[buf.len() - 1], median_sorted(buf));
            if lo < med && med < hi {
                return if lo < center && center < hi { center } else { med };
            }
            if size >= params.max_window {
                return med;
            }
            size += 2;
        }
    }))
}

pub fn acwmf(img: &Image, params: &AcwmfParams) -> Result<Image> {
    params.validate()?;
    let radius = params.window / 2;
    let levels = params.thresholds.len();
    Ok(par_rows(img, |row, col, buf| {
        let center = img.get(row, col);
        gather_window(img, row, col, radius, buf);
        let base_len = buf.len();
        sort_values(buf);
        let med = median_sorted(buf);
        let mut dev: Vec<f64> = buf.iter().map(|v| (v - med).abs()).collect();
        sort_values(&mut dev);
        let mad = median_sorted(&dev);
        for k in 0..levels {
            // Center weight 2k + 1: the center appears 2k extra times.
            let weight = (2 * k + 1).min(params.center_weight);
            let extra = weight - 1;
            let m = weighted_median(buf, base_len, center, extra);
            let threshold = params.s * mad + params.thresholds[k];
            if (m - center).abs() > threshold {
                return med;
            }
        }
        center
    }))
}

/// Median of `sorted` with `extra` additional copies of `center` inserted.
fn weighted_median(sorted: &[f64], len: usize, center: f64, extra: usize) -> f64 {
    let total = len + extra;
    let target = total / 2;
    // Copies of the center sit right after the last value <= center.
    let insert_at = sorted.partition_point(|&v| v <= center);
    if target < insert_at {
        sorted[target]
    } else if target < insert_at + extra {
        center
    } else {
        sorted[target - extra]
    }
}

/// Default filter for an impulse type: AMF for salt-and-pepper, ACWMF for
/// random-valued. ACWMF thresholds follow the image's peak.
pub fn impulse_filter(img: &Image, impulse_type: ImpulseType) -> Result<Image> {
    match impulse_type {
        ImpulseType::SaltPepper => amf(img, &AmfParams::default()),
        ImpulseType::RandomValued => acwmf(img, &AcwmfParams::for_peak(img.peak())),
    }
}

/// `z0 = |filter(img) − img|`.
pub fn init_outlier_field(img: &Image, impulse_type: ImpulseType) -> Result<Image> {
    let filtered = impulse_filter(img, impulse_type)?;
    filtered.zip_map(img, |f, y| (f - y).abs())
}
