//! Image containers, Bayer bookkeeping, normalization and bit-exact netpbm I/O.
//!
//! RAW mosaics are stored as 16-bit binary PGM (P5, big-endian samples) with a
//! JSON sidecar `<name>.meta.json` holding the Bayer pattern and black/white
//! levels. RGB images are 8-bit binary PPM (P6). All in-memory intensities are
//! normalized to `[0, 1]`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2x2 periodic color-filter layout of the sensor mosaic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BayerPattern {
    #[serde(rename = "RGGB")]
    Rggb,
    #[serde(rename = "BGGR")]
    Bggr,
    #[serde(rename = "GRBG")]
    Grbg,
    #[serde(rename = "GBRG")]
    Gbrg,
}

/// Channel sampled at a mosaic site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaColor {
    R,
    G,
    B,
}

impl CfaColor {
    pub fn channel(self) -> usize {
        match self {
            CfaColor::R => 0,
            CfaColor::G => 1,
            CfaColor::B => 2,
        }
    }
}

impl BayerPattern {
    /// Color sampled at site `(i, j)`; a pure function of `(i % 2, j % 2)`.
    pub fn color_at(self, i: usize, j: usize) -> CfaColor {
        let quad = match self {
            BayerPattern::Rggb => [CfaColor::R, CfaColor::G, CfaColor::G, CfaColor::B],
            BayerPattern::Bggr => [CfaColor::B, CfaColor::G, CfaColor::G, CfaColor::R],
            BayerPattern::Grbg => [CfaColor::G, CfaColor::R, CfaColor::B, CfaColor::G],
            BayerPattern::Gbrg => [CfaColor::G, CfaColor::B, CfaColor::R, CfaColor::G],
        };
        quad[(i % 2) * 2 + (j % 2)]
    }
}

/// Single-channel Bayer-mosaic plane in `[0, 1]` -- the attack surface.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub data: Array2<f64>,
    pub pattern: BayerPattern,
    pub black_level: f64,
    pub white_level: f64,
}

impl RawImage {
    pub fn new(data: Array2<f64>, pattern: BayerPattern) -> Result<Self> {
        Self::with_levels(data, pattern, 0.0, 1.0)
    }

    pub fn with_levels(
        data: Array2<f64>,
        pattern: BayerPattern,
        black_level: f64,
        white_level: f64,
    ) -> Result<Self> {
        let (h, w) = data.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::OddDimensions { height: h, width: w });
        }
        if !(0.0..1.0).contains(&black_level) || white_level <= black_level || white_level > 1.0 {
            return Err(Error::Config(format!(
                "invalid levels: black={black_level}, white={white_level}"
            )));
        }
        Ok(RawImage { data, pattern, black_level, white_level })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Replaces pixel data, keeping pattern and levels. Values are clamped to `[0, 1]`.
    pub fn with_data_clamped(&self, data: Array2<f64>) -> Result<Self> {
        Self::with_levels(
            data.mapv(|v| v.clamp(0.0, 1.0)),
            self.pattern,
            self.black_level,
            self.white_level,
        )
    }
}

/// Three-channel image in `[0, 1]`, shape `height x width x 3`, channel order R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub data: Array3<f64>,
}

impl RgbImage {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c != 3 {
            return Err(Error::shape("HxWx3", format!("{:?}", data.dim())));
        }
        Ok(RgbImage { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }
}

/// Sidecar metadata stored next to a RAW PGM file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSidecar {
    #[serde(default = "default_pattern")]
    pub pattern: BayerPattern,
    #[serde(default)]
    pub black_level: f64,
    #[serde(default = "default_white")]
    pub white_level: f64,
}

fn default_pattern() -> BayerPattern {
    BayerPattern::Rggb
}

fn default_white() -> f64 {
    1.0
}

impl Default for RawSidecar {
    fn default() -> Self {
        RawSidecar { pattern: BayerPattern::Rggb, black_level: 0.0, white_level: 1.0 }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta.json");
    path.with_file_name(name)
}

/// Parses a netpbm header: magic, width, height, maxval, with `#` comments.
fn parse_netpbm_header(bytes: &[u8], magic: &str, format: &'static str) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::format(format, format!("expected magic {magic}")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::format(format, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| Error::format(format, "bad header integer"))?;
    }
    // single whitespace byte separates header from samples
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(format, "missing header terminator"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    Ok((w, h, maxval, pos))
}

/// Loads a 16-bit binary PGM plus its JSON sidecar into a normalized [`RawImage`].
pub fn load_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (w, h, maxval, data_start) = parse_netpbm_header(&bytes, "P5", "PGM")?;
    if maxval != 65535 {
        return Err(Error::format("PGM", format!("expected maxval 65535, got {maxval}")));
    }
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::OddDimensions { height: h, width: w });
    }
    let need = h * w * 2;
    let samples = &bytes[data_start..];
    if samples.len() < need {
        return Err(Error::format("PGM", "truncated sample data"));
    }
    let mut data = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let off = (i * w + j) * 2;
            let v = u16::from_be_bytes([samples[off], samples[off + 1]]);
            data[[i, j]] = v as f64 / 65535.0;
        }
    }
    let sc_path = sidecar_path(path);
    let sidecar: RawSidecar = if sc_path.exists() {
        serde_json::from_str(&fs::read_to_string(&sc_path)?)?
    } else {
        RawSidecar::default()
    };
    RawImage::with_levels(data, sidecar.pattern, sidecar.black_level, sidecar.white_level)
}

/// Writes a [`RawImage`] as 16-bit big-endian binary PGM plus JSON sidecar.
pub fn save_raw(img: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.data.dim();
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for i in 0..h {
        for j in 0..w {
            let q = (img.data[[i, j]].clamp(0.0, 1.0) * 65535.0).round() as u16;
            out.write_all(&q.to_be_bytes())?;
        }
    }
    out.flush()?;
    let sidecar = RawSidecar {
        pattern: img.pattern,
        black_level: img.black_level,
        white_level: img.white_level,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads an 8-bit binary PPM into a normalized [`RgbImage`].
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let bytes = fs::read(path.as_ref())?;
    let (w, h, maxval, data_start) = parse_netpbm_header(&bytes, "P6", "PPM")?;
    if maxval != 255 {
        return Err(Error::format("PPM", format!("expected maxval 255, got {maxval}")));
    }
    let need = h * w * 3;
    let samples = &bytes[data_start..];
    if samples.len() < need {
        return Err(Error::format("PPM", "truncated sample data"));
    }
    let mut data = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                data[[i, j, c]] = samples[(i * w + j) * 3 + c] as f64 / 255.0;
            }
        }
    }
    RgbImage::new(data)
}

/// Writes an [`RgbImage`] as 8-bit binary PPM.
pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, _) = img.data.dim();
    let file = fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                buf.push((img.data[[i, j, c]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Inverse mosaicking: samples the channel dictated by `pattern` at each site.
///
/// Used to synthesize RAW data from ordinary RGB images.
pub fn mosaic(rgb: &RgbImage, pattern: BayerPattern) -> Result<RawImage> {
    let (h, w, _) = rgb.data.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimensions { height: h, width: w });
    }
    let mut data = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            data[[i, j]] = rgb.data[[i, j, pattern.color_at(i, j).channel()]];
        }
    }
    RawImage::new(data, pattern)
}

/// Per-element mean squared difference, averaged over all elements including channels.
pub fn l2_loss_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("len {}", a.len()), format!("len {}", b.len())));
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

pub fn l2_loss_raw(a: &RawImage, b: &RawImage) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(format!("{:?}", a.data.dim()), format!("{:?}", b.data.dim())));
    }
    l2_loss_slices(a.data.as_slice().unwrap(), b.data.as_slice().unwrap())
}

pub fn l2_loss_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(format!("{:?}", a.data.dim()), format!("{:?}", b.data.dim())));
    }
    l2_loss_slices(a.data.as_slice().unwrap(), b.data.as_slice().unwrap())
}

/// Peak signal-to-noise ratio in dB for unit dynamic range.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mse = l2_loss_rgb(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn raw_from_u16(h: usize, w: usize, v: u16) -> RawImage {
        RawImage::new(Array2::from_elem((h, w), v as f64 / 65535.0), BayerPattern::Rggb).unwrap()
    }

    #[test]
    fn pgm_all_zero_loads_as_zero() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        save_raw(&raw_from_u16(4, 4, 0), &p).unwrap();
        let img = load_raw(&p).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_all_max_loads_as_one() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        save_raw(&raw_from_u16(4, 4, 65535), &p).unwrap();
        let img = load_raw(&p).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pgm_midpoint_scaling() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        save_raw(&raw_from_u16(2, 2, 32768), &p).unwrap();
        let img = load_raw(&p).unwrap();
        let expected = 32768.0 / 65535.0;
        assert!((img.data[[0, 0]] - expected).abs() < 1e-15);
        assert!((expected - 0.50000763).abs() < 1e-7);
    }

    #[test]
    fn raw_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("r.pgm");
        let mut data = Array2::zeros((4, 6));
        for (k, v) in data.iter_mut().enumerate() {
            *v = ((k * 9973) % 65536) as f64 / 65535.0;
        }
        let img = RawImage::new(data, BayerPattern::Grbg).unwrap();
        save_raw(&img, &p).unwrap();
        let back = load_raw(&p).unwrap();
        assert_eq!(back.pattern, BayerPattern::Grbg);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert_eq!((a * 65535.0).round(), (b * 65535.0).round());
        }
        // a second round trip is byte-identical
        let p2 = dir.path().join("r2.pgm");
        save_raw(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rgb_quantization_endpoints() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("q.ppm");
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 0, 0]] = 1.0;
        data[[0, 1, 1]] = 0.5;
        save_rgb(&RgbImage::new(data).unwrap(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let pix = &bytes[bytes.len() - 12..];
        assert_eq!(pix[0], 255); // 1.0 -> 255
        assert_eq!(pix[4], 128); // 0.5 -> round(127.5) = 128
    }

    #[test]
    fn sidecar_defaults_when_missing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.pgm");
        save_raw(&raw_from_u16(2, 2, 100), &p).unwrap();
        fs::remove_file(sidecar_path(&p)).unwrap();
        let img = load_raw(&p).unwrap();
        assert_eq!(img.pattern, BayerPattern::Rggb);
        assert_eq!(img.black_level, 0.0);
        assert_eq!(img.white_level, 1.0);
    }

    #[test]
    fn odd_dimensions_rejected() {
        let err = RawImage::new(Array2::zeros((3, 4)), BayerPattern::Rggb).unwrap_err();
        assert!(matches!(err, Error::OddDimensions { .. }));
        let dir = tempdir().unwrap();
        let p = dir.path().join("odd.pgm");
        fs::write(&p, b"P5\n3 3\n65535\n" as &[u8]).unwrap();
        assert!(load_raw(&p).is_err());
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P6\n4 4\n65535\n" as &[u8]).unwrap();
        assert!(matches!(load_raw(&p), Err(Error::Format { .. })));
        fs::write(&p, b"P5\n4 abc\n65535\n" as &[u8]).unwrap();
        assert!(matches!(load_raw(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn mosaic_constant_gray() {
        let rgb = RgbImage::new(Array3::from_elem((4, 4, 3), 0.42)).unwrap();
        let raw = mosaic(&rgb, BayerPattern::Rggb).unwrap();
        assert!(raw.data.iter().all(|&v| (v - 0.42).abs() < 1e-15));
    }

    #[test]
    fn mosaic_pure_red_rggb() {
        let mut data = Array3::zeros((4, 4, 3));
        data.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let raw = mosaic(&RgbImage::new(data).unwrap(), BayerPattern::Rggb).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i % 2 == 0 && j % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(raw.data[[i, j]], expected, "site ({i},{j})");
            }
        }
    }

    #[test]
    fn mosaic_recovers_sampled_sites() {
        let mut data = Array3::zeros((6, 6, 3));
        for i in 0..6 {
            for j in 0..6 {
                for c in 0..3 {
                    data[[i, j, c]] = ((i * 31 + j * 7 + c * 3) % 10) as f64 / 10.0;
                }
            }
        }
        let rgb = RgbImage::new(data).unwrap();
        for pat in [BayerPattern::Rggb, BayerPattern::Bggr, BayerPattern::Grbg, BayerPattern::Gbrg] {
            let raw = mosaic(&rgb, pat).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let c = pat.color_at(i, j).channel();
                    assert_eq!(raw.data[[i, j]], rgb.data[[i, j, c]]);
                }
            }
        }
    }

    #[test]
    fn l2_loss_basic_cases() {
        assert_eq!(l2_loss_slices(&[0.5], &[0.5]).unwrap(), 0.0);
        assert_eq!(l2_loss_slices(&[0.5], &[0.0]).unwrap(), 0.25);
        let a = [0.1; 4];
        let b = [0.2; 4];
        assert!((l2_loss_slices(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!(l2_loss_slices(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn l2_loss_symmetry_property() {
        let a: Vec<f64> = (0..32).map(|k| (k as f64 * 0.77).sin().abs()).collect();
        let b: Vec<f64> = (0..32).map(|k| (k as f64 * 1.31).cos().abs()).collect();
        let ab = l2_loss_slices(&a, &b).unwrap();
        let ba = l2_loss_slices(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0);
    }
}
