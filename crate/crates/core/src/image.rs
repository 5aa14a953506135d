//! Grayscale image container, pixel masks and the PSNR metric.
//!
//! Intensities are `f64` everywhere in the pipeline. Quantization only
//! happens in [`crate::io`] when an image is exported.

use crate::error::{invalid, Error, Result};

/// PSNR returned when the two images are identical (zero MSE).
pub const PSNR_INFINITE: f64 = f64::INFINITY;

/// A `width x height` plane of real intensities stored row-major, with a
/// nominal peak value.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
    peak: f64,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>, peak: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return invalid(format!("image dimensions must be positive, got {width}x{height}"));
        }
        if data.len() != width * height {
            return invalid(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            ));
        }
        if !(peak > 0.0 && peak.is_finite()) {
            return invalid(format!("peak must be positive and finite, got {peak}"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            data,
            peak,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64, peak: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height], peak)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        peak: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self::new(width, height, data, peak)
    }

    /// Builds an image with the same geometry and peak as `self`.
    ///
    /// Panics if `data` has the wrong length. Finiteness is checked in debug
    /// builds only; this is the hot constructor used inside solver loops.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "pixel count mismatch");
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            width: self.width,
            height: self.height,
            data,
            peak: self.peak,
        }
    }

    pub fn with_peak(mut self, peak: f64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return invalid(format!("peak must be positive and finite, got {peak}"));
        }
        self.peak = peak;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_dims(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        check_dims(self.width, self.height, other.width, other.height)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

pub(crate) fn check_dims(ew: usize, eh: usize, gw: usize, gh: usize) -> Result<()> {
    if ew == gw && eh == gh {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected_w: ew,
            expected_h: eh,
            got_w: gw,
            got_h: gh,
        })
    }
}

/// One boolean per pixel. `true` marks a pixel as trusted (inside Ω).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return invalid(format!(
                "mask length {} does not match {width}x{height}",
                bits.len()
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    /// Ω = { i : z_i = 0 }.
    pub fn from_zero_entries(z: &Image) -> Self {
        Self {
            width: z.width(),
            height: z.height(),
            bits: z.data().iter().map(|&v| v == 0.0).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn count_false(&self) -> usize {
        self.bits.len() - self.count_true()
    }

    pub fn check_matches(&self, img: &Image) -> Result<()> {
        check_dims(img.width(), img.height(), self.width, self.height)
    }
}

/// Peak signal-to-noise ratio in decibels, `10 log10(peak^2 / MSE)`.
///
/// Returns [`PSNR_INFINITE`] when the images are identical.
pub fn psnr(reference: &Image, estimate: &Image, peak: f64) -> Result<f64> {
    reference.check_same_dims(estimate)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return invalid(format!("peak must be positive and finite, got {peak}"));
    }
    // Image construction already rejects non-finite pixels; images built via
    // `with_data` are only debug-checked, so verify here as well.
    for (i, (a, b)) in reference.data().iter().zip(estimate.data()).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }
    let sse: f64 = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_INFINITE);
    }
    let mse = sse / reference.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Clamps every pixel into `[lo, hi]`.
pub fn clamp_to_range(img: &Image, lo: f64, hi: f64) -> Result<Image> {
    if !(lo < hi) {
        return invalid(format!("clamp range must satisfy lo < hi, got [{lo}, {hi}]"));
    }
    Ok(img.map(|v| v.clamp(lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(v: f64) -> Image {
        Image::filled(4, 3, v, 255.0).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Image::new(0, 3, vec![], 1.0).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3], 1.0).is_err());
        assert!(Image::new(1, 1, vec![0.0], 0.0).is_err());
        assert!(matches!(
            Image::new(2, 1, vec![0.0, f64::NAN], 1.0),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn psnr_examples() {
        let a = flat(17.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_INFINITE);
        assert!((psnr(&flat(0.0), &flat(255.0), 255.0).unwrap() - 0.0).abs() < 1e-12);
        assert!((psnr(&flat(0.0), &flat(25.5), 255.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_dimension_mismatch() {
        let a = flat(0.0);
        let b = Image::filled(3, 4, 0.0, 255.0).unwrap();
        assert!(matches!(
            psnr(&a, &b, 255.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn psnr_rejects_nonfinite_from_unchecked_path() {
        let a = flat(0.0);
        let mut data = a.data().to_vec();
        data[2] = f64::INFINITY;
        let b = Image {
            data,
            ..a.clone()
        };
        assert!(matches!(psnr(&a, &b, 255.0), Err(Error::NonFinite(2))));
    }

    #[test]
    fn clamp_examples() {
        let img = Image::new(3, 1, vec![-3.0, 100.0, 300.0], 255.0).unwrap();
        let out = clamp_to_range(&img, 0.0, 255.0).unwrap();
        assert_eq!(out.data(), &[0.0, 100.0, 255.0]);
        let inside = flat(12.5);
        assert_eq!(clamp_to_range(&inside, 0.0, 255.0).unwrap(), inside);
        assert!(clamp_to_range(&inside, 1.0, 1.0).is_err());
    }

    fn image_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0..400.0f64, n),
                prop::collection::vec(-100.0..400.0f64, n),
            )
        })
    }

    proptest! {
        #[test]
        fn psnr_self_is_infinite(a in prop::collection::vec(-1e3..1e3f64, 1..50)) {
            let img = Image::new(a.len(), 1, a, 10.0).unwrap();
            prop_assert_eq!(psnr(&img, &img, 10.0).unwrap(), PSNR_INFINITE);
        }

        #[test]
        fn psnr_symmetric_and_scale_invariant((a, b) in image_pair(), c in 0.01..100.0f64) {
            prop_assume!(a != b);
            let n = a.len();
            let ia = Image::new(n, 1, a.clone(), 255.0).unwrap();
            let ib = Image::new(n, 1, b.clone(), 255.0).unwrap();
            let p1 = psnr(&ia, &ib, 255.0).unwrap();
            let p2 = psnr(&ib, &ia, 255.0).unwrap();
            prop_assert_eq!(p1, p2);
            let sa = ia.map(|v| v * c);
            let sb = ib.map(|v| v * c);
            let p3 = psnr(&sa, &sb, 255.0 * c).unwrap();
            prop_assert!((p1 - p3).abs() < 1e-9);
        }
    }
}
