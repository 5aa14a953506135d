//! Gaussian denoisers usable as the prox of an implicit image prior.
//!
//! `PatchTransform` is a single hard-thresholding pass of collaborative
//! filtering: block matching, a separable orthonormal DCT over each group
//! (2D within patches, 1D across the group), hard thresholding, and
//! weighted aggregation of overlapping estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filters::reflect;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserKind {
    Identity,
    GaussianBlur,
    PatchTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    /// Assumed noise standard deviation. For `GaussianBlur` it is the kernel
    /// standard deviation in pixels.
    pub strength: f64,
    pub patch_size: usize,
    pub search_radius: usize,
    pub max_matches: usize,
    /// Distance between reference patches.
    pub step: usize,
    /// Hard threshold as a multiple of `strength`.
    pub threshold_factor: f64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::PatchTransform,
            strength: 1.0,
            patch_size: 5,
            search_radius: 6,
            max_matches: 8,
            step: 2,
            threshold_factor: 2.7,
        }
    }
}

impl DenoiserSpec {
    pub fn identity() -> Self {
        Self {
            kind: DenoiserKind::Identity,
            ..Self::default()
        }
    }

    pub fn gaussian_blur(strength: f64) -> Self {
        Self {
            kind: DenoiserKind::GaussianBlur,
            strength,
            ..Self::default()
        }
    }

    pub fn patch_transform(strength: f64) -> Self {
        Self {
            strength,
            ..Self::default()
        }
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return invalid(format!("denoiser strength must be >= 0, got {}", self.strength));
        }
        if self.kind == DenoiserKind::PatchTransform {
            if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
                return invalid(format!(
                    "patch size must be odd and >= 3, got {}",
                    self.patch_size
                ));
            }
            if self.max_matches == 0 || self.step == 0 {
                return invalid("max_matches and step must be positive");
            }
            if !(self.threshold_factor >= 0.0) {
                return invalid("threshold factor must be >= 0");
            }
        }
        Ok(())
    }
}

pub fn denoise(img: &Image, spec: &DenoiserSpec) -> Result<Image> {
    spec.validate()?;
    match spec.kind {
        DenoiserKind::Identity => Ok(img.clone()),
        DenoiserKind::GaussianBlur => Ok(gaussian_blur(img, spec.strength)),
        DenoiserKind::PatchTransform => patch_transform(img, spec),
    }
}

fn gaussian_blur(img: &Image, sigma_px: f64) -> Image {
    if sigma_px == 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma_px).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma_px).powi(2)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (img.width(), img.height());
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    tmp.par_chunks_mut(w).enumerate().for_each(|(r, dst)| {
        for (c, d) in dst.iter_mut().enumerate() {
            *d = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * src[r * w + reflect(c as isize + j as isize - radius, w)])
                .sum();
        }
    });
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(r, dst)| {
        for (c, d) in dst.iter_mut().enumerate() {
            *d = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[reflect(r as isize + j as isize - radius, h) * w + c])
                .sum();
        }
    });
    img.with_data(out)
}

/// Orthonormal DCT-II matrix, row `k` holds basis vector `k`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let alpha = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] =
                alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Applies `mat` (or its transpose) along one axis of a strided buffer.
fn transform_axis(
    data: &mut [f64],
    mat: &[f64],
    n: usize,
    stride: usize,
    starts: impl Iterator<Item = usize>,
    inverse: bool,
) {
    let mut tmp = vec![0.0; n];
    for s in starts {
        for (k, t) in tmp.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                let coef = if inverse { mat[i * n + k] } else { mat[k * n + i] };
                acc += coef * data[s + i * stride];
            }
            *t = acc;
        }
        for (k, t) in tmp.iter().enumerate() {
            data[s + k * stride] = *t;
        }
    }
}

/// Forward or inverse separable 3D DCT of a `group x p x p` block.
fn transform_group(block: &mut [f64], group: usize, p: usize, dct_p: &[f64], dct_g: &[f64], inverse: bool) {
    let pp = p * p;
    let along_cols = |blk: &mut [f64]| {
        // transform each row of each patch
        transform_axis(blk, dct_p, p, 1, (0..group).flat_map(|g| (0..p).map(move |r| g * pp + r * p)), inverse)
    };
    let along_rows = |blk: &mut [f64]| {
        transform_axis(blk, dct_p, p, p, (0..group).flat_map(|g| (0..p).map(move |c| g * pp + c)), inverse)
    };
    let along_group = |blk: &mut [f64]| {
        transform_axis(blk, dct_g, group, pp, 0..pp, inverse)
    };
    if inverse {
        along_group(block);
        along_rows(block);
        along_cols(block);
    } else {
        along_cols(block);
        along_rows(block);
        along_group(block);
    }
}

fn positions(len: usize, p: usize, step: usize) -> Vec<usize> {
    let last = len - p;
    let mut v: Vec<usize> = (0..=last).step_by(step).collect();
    if *v.last().unwrap() != last {
        v.push(last);
    }
    v
}

struct GroupEstimate {
    coords: Vec<(usize, usize)>,
    block: Vec<f64>,
    weight: f64,
}

fn patch_transform(img: &Image, spec: &DenoiserSpec) -> Result<Image> {
    let p = spec.patch_size;
    let (w, h) = (img.width(), img.height());
    if w < p || h < p {
        return Err(Error::Denoiser(format!(
            "image {w}x{h} is smaller than patch size {p}"
        )));
    }
    let src = img.data();
    let pp = p * p;
    let threshold = spec.threshold_factor * spec.strength;
    let dct_p = dct_matrix(p);
    let refs: Vec<(usize, usize)> = positions(h, p, spec.step)
        .into_iter()
        .flat_map(|r| positions(w, p, spec.step).into_iter().map(move |c| (r, c)))
        .collect();

    let distance = |(r0, c0): (usize, usize), (r1, c1): (usize, usize)| -> f64 {
        let mut d = 0.0;
        for i in 0..p {
            let a = &src[(r0 + i) * w + c0..(r0 + i) * w + c0 + p];
            let b = &src[(r1 + i) * w + c1..(r1 + i) * w + c1 + p];
            for (x, y) in a.iter().zip(b) {
                d += (x - y) * (x - y);
            }
        }
        d
    };

    let estimates: Vec<GroupEstimate> = refs
        .par_iter()
        .map(|&(r0, c0)| {
            let rad = spec.search_radius;
            let (rlo, rhi) = (r0.saturating_sub(rad), (r0 + rad).min(h - p));
            let (clo, chi) = (c0.saturating_sub(rad), (c0 + rad).min(w - p));
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for r in rlo..=rhi {
                for c in clo..=chi {
                    if (r, c) != (r0, c0) {
                        cands.push((distance((r0, c0), (r, c)), r, c));
                    }
                }
            }
            cands.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut coords = vec![(r0, c0)];
            coords.extend(cands.iter().take(spec.max_matches - 1).map(|&(_, r, c)| (r, c)));

            let group = coords.len();
            let mut block = vec![0.0; group * pp];
            for (g, &(r, c)) in coords.iter().enumerate() {
                for i in 0..p {
                    block[g * pp + i * p..g * pp + i * p + p]
                        .copy_from_slice(&src[(r + i) * w + c..(r + i) * w + c + p]);
                }
            }
            let dct_g = dct_matrix(group);
            transform_group(&mut block, group, p, &dct_p, &dct_g, false);
            let mut retained = 0usize;
            for (i, v) in block.iter_mut().enumerate() {
                // the DC coefficient is never thresholded
                if i == 0 || v.abs() >= threshold {
                    retained += 1;
                } else {
                    *v = 0.0;
                }
            }
            transform_group(&mut block, group, p, &dct_p, &dct_g, true);
            GroupEstimate {
                coords,
                block,
                weight: 1.0 / (1.0 + retained as f64),
            }
        })
        .collect();

    let mut num = vec![0.0; src.len()];
    let mut den = vec![0.0; src.len()];
    for est in &estimates {
        for (g, &(r, c)) in est.coords.iter().enumerate() {
            for i in 0..p {
                for j in 0..p {
                    let idx = (r + i) * w + c + j;
                    num[idx] += est.weight * est.block[g * pp + i * p + j];
                    den[idx] += est.weight;
                }
            }
        }
    }
    let out: Vec<f64> = num
        .iter()
        .zip(&den)
        .zip(src)
        .map(|((n, d), s)| if *d > 0.0 { n / d } else { *s })
        .collect();
    Ok(img.with_data(out))
}
