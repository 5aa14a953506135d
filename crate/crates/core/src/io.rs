//! Image files (PGM P5/P2, grayscale PNG) and lookup-table persistence.
//!
//! Export maps `[0, img.peak]` onto `[0, declared_max]`, rounds half away
//! from zero and clamps.
//!
//! LUT binary layout, all little-endian:
//!
//! | bytes | content                   |
//! |-------|---------------------------|
//! | 8     | magic `MINDXLUT`          |
//! | 4     | format version (`u32`)    |
//! | 8     | σ (`f64`)                 |
//! | 8     | grid length `n` (`u64`)   |
//! | 8n    | stabilized grid (`f64`)   |
//! | 8n    | clean values (`f64`)      |

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::vst::{build_exact_unbiased_lut_with, GatLut, LutGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pgm8,
    Pgm16,
    Png8,
    Png16,
}

impl ImageFormat {
    pub fn declared_max(self) -> u32 {
        match self {
            ImageFormat::Pgm8 | ImageFormat::Png8 => 255,
            ImageFormat::Pgm16 | ImageFormat::Png16 => 65535,
        }
    }

    /// Picks a format from a file extension; 8-bit unless `sixteen_bit`.
    pub fn from_path(path: &Path, sixteen_bit: bool) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match (ext.as_deref(), sixteen_bit) {
            (Some("pgm"), false) => Ok(ImageFormat::Pgm8),
            (Some("pgm"), true) => Ok(ImageFormat::Pgm16),
            (Some("png"), false) => Ok(ImageFormat::Png8),
            (Some("png"), true) => Ok(ImageFormat::Png16),
            _ => Err(Error::Format(format!(
                "cannot infer image format from {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageFileMeta {
    pub format: ImageFormat,
    pub declared_max: u32,
}

impl ImageFileMeta {
    pub fn new(format: ImageFormat) -> Self {
        Self {
            format,
            declared_max: format.declared_max(),
        }
    }
}

/// Rescales to `[0, max]`, rounds half away from zero and clamps.
pub fn quantize(img: &Image, max: u32) -> Vec<u32> {
    let scale = max as f64 / img.peak();
    img.data()
        .iter()
        .map(|&v| (v * scale).round().clamp(0.0, max as f64) as u32)
        .collect()
}

pub fn read_image(path: impl AsRef<Path>) -> Result<(Image, ImageFileMeta)> {
    let bytes = fs::read(path.as_ref())?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<(Image, ImageFileMeta)> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        decode_pgm(bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else {
        Err(Error::Format("unrecognized magic number".into()))
    }
}

pub fn write_image(img: &Image, path: impl AsRef<Path>, meta: ImageFileMeta) -> Result<()> {
    fs::write(path, encode_image(img, meta)?)?;
    Ok(())
}

pub fn encode_image(img: &Image, meta: ImageFileMeta) -> Result<Vec<u8>> {
    if meta.declared_max != meta.format.declared_max() {
        return Err(Error::Format(format!(
            "declared max {} does not match {:?}",
            meta.declared_max, meta.format
        )));
    }
    let q = quantize(img, meta.declared_max);
    match meta.format {
        ImageFormat::Pgm8 | ImageFormat::Pgm16 => Ok(encode_pgm(img.width(), img.height(), &q, meta.declared_max)),
        ImageFormat::Png8 | ImageFormat::Png16 => encode_png(img.width(), img.height(), &q, meta.format),
    }
}

fn encode_pgm(w: usize, h: usize, q: &[u32], max: u32) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n{max}\n").into_bytes();
    if max < 256 {
        out.extend(q.iter().map(|&v| v as u8));
    } else {
        for &v in q {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        }
    }
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("missing or malformed PGM {what}")))
    }
}

fn decode_pgm(bytes: &[u8]) -> Result<(Image, ImageFileMeta)> {
    let plain = bytes.starts_with(b"P2");
    let mut rd = HeaderReader { bytes, pos: 2 };
    let w = rd.number("width")?;
    let h = rd.number("height")?;
    let max = rd.number("maxval")?;
    let format = match max {
        255 => ImageFormat::Pgm8,
        65535 => ImageFormat::Pgm16,
        other => {
            return Err(Error::Format(format!(
                "unsupported PGM maxval {other}, expected 255 or 65535"
            )))
        }
    };
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("invalid PGM dimensions {w}x{h}")));
    }
    let n = w * h;
    let mut values = Vec::with_capacity(n);
    if plain {
        for _ in 0..n {
            let v = rd.number("sample").map_err(|_| Error::Format("truncated PGM payload".into()))?;
            if v > max {
                return Err(Error::Format(format!("sample {v} exceeds maxval {max}")));
            }
            values.push(v as f64);
        }
    } else {
        // exactly one whitespace byte after maxval
        let start = rd.pos + 1;
        let depth = if max < 256 { 1 } else { 2 };
        let end = start + n * depth;
        if bytes.len() < end {
            return Err(Error::Format(format!(
                "truncated PGM payload: need {} bytes, have {}",
                n * depth,
                bytes.len().saturating_sub(start)
            )));
        }
        let payload = &bytes[start..end];
        if depth == 1 {
            values.extend(payload.iter().map(|&b| b as f64));
        } else {
            values.extend(payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64));
        }
    }
    let img = Image::new(w, h, values, max as f64)?;
    Ok((img, ImageFileMeta::new(format)))
}

fn decode_png(bytes: &[u8]) -> Result<(Image, ImageFileMeta)> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG decode failed: {e}")))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (values, format): (Vec<f64>, _) = match dynimg {
        image::DynamicImage::ImageLuma8(buf) => (buf.into_raw().into_iter().map(f64::from).collect(), ImageFormat::Png8),
        image::DynamicImage::ImageLuma16(buf) => (buf.into_raw().into_iter().map(f64::from).collect(), ImageFormat::Png16),
        other => {
            return Err(Error::Format(format!(
                "only grayscale PNG is supported, got {:?}",
                other.color()
            )))
        }
    };
    let img = Image::new(w, h, values, format.declared_max() as f64)?;
    Ok((img, ImageFileMeta::new(format)))
}

fn encode_png(w: usize, h: usize, q: &[u32], format: ImageFormat) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    let err = |e: image::ImageError| Error::Format(format!("PNG encode failed: {e}"));
    match format {
        ImageFormat::Png8 => {
            let buf = image::GrayImage::from_raw(w as u32, h as u32, q.iter().map(|&v| v as u8).collect())
                .expect("buffer size matches");
            buf.write_to(&mut out, image::ImageFormat::Png).map_err(err)?;
        }
        _ => {
            let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
                w as u32,
                h as u32,
                q.iter().map(|&v| v as u16).collect(),
            )
            .expect("buffer size matches");
            buf.write_to(&mut out, image::ImageFormat::Png).map_err(err)?;
        }
    }
    Ok(out.into_inner())
}

pub const LUT_MAGIC: &[u8; 8] = b"MINDXLUT";
pub const LUT_VERSION: u32 = 1;

pub fn encode_lut(lut: &GatLut) -> Vec<u8> {
    let n = lut.grid().len();
    let mut out = Vec::with_capacity(28 + 16 * n);
    out.extend_from_slice(LUT_MAGIC);
    out.extend_from_slice(&LUT_VERSION.to_le_bytes());
    out.extend_from_slice(&lut.sigma().to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in lut.grid().iter().chain(lut.values()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_lut(bytes: &[u8]) -> Result<GatLut> {
    let bad = |m: &str| Error::LutFile(m.to_string());
    if bytes.len() < 28 || &bytes[..8] != LUT_MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != LUT_VERSION {
        return Err(Error::LutFile(format!("unsupported version {version}")));
    }
    let sigma = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let n = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let body = &bytes[28..];
    if n.checked_mul(16) != Some(body.len()) {
        return Err(Error::LutFile(format!(
            "expected {n} entries, payload has {} bytes",
            body.len()
        )));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (grid, values) = floats.split_at(n);
    GatLut::from_parts(sigma, grid.to_vec(), values.to_vec())
        .map_err(|e| Error::LutFile(e.to_string()))
}

pub fn write_lut(lut: &GatLut, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_lut(lut))?;
    Ok(())
}

pub fn read_lut(path: impl AsRef<Path>) -> Result<GatLut> {
    decode_lut(&fs::read(path)?)
}

pub fn lut_to_csv(lut: &GatLut) -> String {
    let mut s = String::from("stabilized,clean\n");
    for (g, v) in lut.grid().iter().zip(lut.values()) {
        s.push_str(&format!("{g:e},{v:e}\n"));
    }
    s
}

/// Cache file name keyed by σ, range, grid and format version.
pub fn lut_cache_path(dir: &Path, sigma: f64, x_max: f64, grid: LutGrid) -> PathBuf {
    dir.join(format!(
        "gat-v{LUT_VERSION}-s{:016x}-x{:016x}-n{}-m{:016x}.lut",
        sigma.to_bits(),
        x_max.to_bits(),
        grid.points,
        grid.min_clean.to_bits()
    ))
}

/// Loads a cached table or builds and stores a new one. A cached file whose
/// header disagrees with the request is rebuilt.
pub fn load_or_build_lut(dir: &Path, sigma: f64, x_max: f64, grid: LutGrid) -> Result<GatLut> {
    let path = lut_cache_path(dir, sigma, x_max, grid);
    if let Ok(lut) = read_lut(&path) {
        let matches = lut.sigma().to_bits() == sigma.to_bits()
            && lut.grid().len() == grid.points + 1
            && lut.x_max().to_bits() == x_max.to_bits();
        if matches {
            return Ok(lut);
        }
        log::warn!("stale lookup table at {}, rebuilding", path.display());
    }
    let lut = build_exact_unbiased_lut_with(sigma, x_max, grid)?;
    fs::create_dir_all(dir)?;
    write_lut(&lut, &path)?;
    Ok(lut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vst::build_exact_unbiased_lut;

    #[test]
    fn pgm8_round_trip_is_bit_exact() {
        let img = Image::from_fn(7, 5, 255.0, |r, c| ((r * 37 + c * 11) % 256) as f64).unwrap();
        let bytes = encode_image(&img, ImageFileMeta::new(ImageFormat::Pgm8)).unwrap();
        let (back, meta) = decode_image(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(meta.format, ImageFormat::Pgm8);
    }

    #[test]
    fn zero_payload() {
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend([0u8; 6]);
        let (img, _) = decode_image(&bytes).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert_eq!(img.peak(), 255.0);
    }

    #[test]
    fn plain_pgm_with_comments() {
        let text = b"P2\n# comment\n3 1\n# another\n65535\n0 1000\n65535\n";
        let (img, meta) = decode_image(text).unwrap();
        assert_eq!(img.data(), &[0.0, 1000.0, 65535.0]);
        assert_eq!(meta.format, ImageFormat::Pgm16);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(decode_image(b"P6\n1 1\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"P5\n4 4\n255\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"P5\n1 1\n100\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode_image(b"P2\n2 1\n255\n300 1\n"), Err(Error::Format(_))));
    }

    #[test]
    fn export_quantization_rules() {
        let img = Image::new(3, 1, vec![20.0, -0.4, 10.0], 20.0).unwrap();
        assert_eq!(quantize(&img, 255), vec![255, 0, 128]);
        let bytes = encode_image(&img, ImageFileMeta::new(ImageFormat::Pgm8)).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 128]);
    }

    #[test]
    fn read_of_write_equals_quantized() {
        let img = Image::from_fn(9, 4, 20.0, |r, c| (r as f64 * 3.3 - c as f64 * 0.7).sin() * 12.0 + 6.0).unwrap();
        for fmt in [ImageFormat::Pgm8, ImageFormat::Pgm16, ImageFormat::Png8, ImageFormat::Png16] {
            let meta = ImageFileMeta::new(fmt);
            let bytes = encode_image(&img, meta).unwrap();
            assert_eq!(bytes, encode_image(&img, meta).unwrap());
            let (back, m2) = decode_image(&bytes).unwrap();
            assert_eq!(m2.format, fmt);
            let q = quantize(&img, meta.declared_max);
            for (a, b) in back.data().iter().zip(q) {
                assert_eq!(*a, b as f64);
            }
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(6, 6, 255.0, |r, c| (r * 40 + c) as f64).unwrap();
        for name in ["a.pgm", "b.png"] {
            let path = dir.path().join(name);
            let fmt = ImageFormat::from_path(&path, false).unwrap();
            write_image(&img, &path, ImageFileMeta::new(fmt)).unwrap();
            assert_eq!(read_image(&path).unwrap().0, img);
        }
        assert!(ImageFormat::from_path(Path::new("x.tif"), false).is_err());
    }

    #[test]
    fn lut_binary_round_trip_and_header() {
        let lut = build_exact_unbiased_lut(1.5, 20.0).unwrap();
        let bytes = encode_lut(&lut);
        assert_eq!(&bytes[..8], b"MINDXLUT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[12..20].try_into().unwrap()), 1.5);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 513);
        assert_eq!(decode_lut(&bytes).unwrap(), lut);
        assert!(decode_lut(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(decode_lut(&wrong).is_err());
        assert!(lut_to_csv(&lut).lines().count() == 514);
    }

    #[test]
    fn lut_cache_reuses_and_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let grid = LutGrid { points: 64, min_clean: 1e-3 };
        let a = load_or_build_lut(dir.path(), 1.0, 30.0, grid).unwrap();
        let path = lut_cache_path(dir.path(), 1.0, 30.0, grid);
        assert!(path.exists());
        assert_eq!(load_or_build_lut(dir.path(), 1.0, 30.0, grid).unwrap(), a);
        // Corrupt the cached table's sigma: it must be rebuilt.
        let other = build_exact_unbiased_lut_with(2.0, 30.0, grid).unwrap();
        write_lut(&other, &path).unwrap();
        assert_eq!(load_or_build_lut(dir.path(), 1.0, 30.0, grid).unwrap(), a);
    }
}
