//! Image codecs and atomic file writes.
//!
//! Supported: binary and ASCII PGM/PPM with 8-bit samples, the raw `.nfi`
//! float container, and PNG when built with the `png` feature. Images are
//! tensors shaped (1, c, h, w) with c = 1 or 3 and values nominally in [0, 1].

use std::fs;
use std::io::{self, Write};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const NFI_MAGIC: &[u8; 4] = b"NFI1";

fn invalid(path: &Path, msg: impl Into<String>) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Pnm,
    Nfi,
    Png,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" | "ppm" | "pnm" => Ok(Format::Pnm),
        "nfi" => Ok(Format::Nfi),
        "png" => Ok(Format::Png),
        _ => Err(invalid(path, format!("unsupported image extension {ext:?}"))),
    }
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let format = format_of(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Nfi => decode_nfi(&bytes).map_err(|m| invalid(path, m)),
        Format::Pnm => decode_pnm(&bytes).map_err(|m| invalid(path, m)),
        Format::Png => decode_png(path, &bytes),
    }
}

pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let format = format_of(path)?;
    let bytes = match format {
        Format::Nfi => encode_nfi(img)?,
        Format::Pnm => encode_pnm(img)?,
        Format::Png => encode_png(path, img)?,
    };
    write_atomic(path, &bytes)
}

fn check_image_shape(img: &Tensor<f32>, allow: &[usize]) -> Result<()> {
    let s = img.shape();
    if s.n() != 1 || !allow.contains(&s.c()) {
        return Err(Error::Dimension(format!("cannot store tensor {s} as an image")));
    }
    Ok(())
}

pub fn encode_nfi(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.n() != 1 {
        return Err(Error::Dimension(format!(".nfi holds one image, got {s}")));
    }
    let mut out = Vec::with_capacity(16 + 4 * s.numel());
    out.extend_from_slice(NFI_MAGIC);
    for d in [s.c(), s.h(), s.w()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_nfi(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < 16 || &bytes[..4] != NFI_MAGIC {
        return Err("not an NFI1 file".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or("NFI dimensions overflow")?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(format!(
            "NFI payload is {} bytes, header {c}x{h}x{w} needs {expected}",
            payload.len()
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(Shape::new(1, c, h, w), data).map_err(|e| e.to_string())
}

/// Quantises to 8 bits with rounding; values are clamped to [0, 1].
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    check_image_shape(img, &[1, 3])?;
    let s = img.shape();
    let magic = if s.c() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..s.c() {
                out.push(to_u8(img.at(0, c, y, x)));
            }
        }
    }
    Ok(out)
}

struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("expected a number at byte {start}"))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err("missing PNM magic".into());
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        m => return Err(format!("unsupported PNM variant P{}", m as char)),
    };
    let mut r = PnmReader { bytes, pos: 2 };
    let w = r.number()?;
    let h = r.number()?;
    let maxval = r.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("only 8-bit PNM is supported, maxval {maxval}"));
    }
    let n = w * h * channels;
    let samples: Vec<u8> = if binary {
        let start = r.pos + 1;
        let body = bytes.get(start..start + n).ok_or_else(|| {
            format!("truncated PNM payload: need {n} bytes after byte {start}")
        })?;
        body.to_vec()
    } else {
        (0..n)
            .map(|_| r.number().and_then(|v| u8::try_from(v).map_err(|_| format!("sample {v} > 255"))))
            .collect::<std::result::Result<_, _>>()?
    };
    if let Some(&bad) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {bad} exceeds maxval {maxval}"));
    }
    let maxval = maxval as f32;
    Ok(Tensor::from_fn(Shape::new(1, channels, h, w), |_, c, y, x| {
        samples[(y * w + x) * channels + c] as f32 / maxval
    }))
}

#[cfg(feature = "png")]
fn decode_png(path: &Path, bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| invalid(path, e.to_string()))?;
    let is_gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if is_gray {
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        Ok(Tensor::from_fn(Shape::new(1, 1, h as usize, w as usize), |_, _, y, x| {
            g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        }))
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Tensor::from_fn(Shape::new(1, 3, h as usize, w as usize), |_, c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    }
}

#[cfg(not(feature = "png"))]
fn decode_png(path: &Path, _bytes: &[u8]) -> Result<Tensor<f32>> {
    Err(invalid(path, "PNG support requires the `png` feature"))
}

#[cfg(feature = "png")]
fn encode_png(path: &Path, img: &Tensor<f32>) -> Result<Vec<u8>> {
    check_image_shape(img, &[1, 3])?;
    let pnm = encode_pnm(img)?;
    let s = img.shape();
    let header = pnm.len() - s.c() * s.h() * s.w();
    let raw = pnm[header..].to_vec();
    let color = if s.c() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &raw,
        s.w() as u32,
        s.h() as u32,
        color,
    )
    .map_err(|e| invalid(path, e.to_string()))?;
    Ok(out)
}

#[cfg(not(feature = "png"))]
fn encode_png(path: &Path, _img: &Tensor<f32>) -> Result<Vec<u8>> {
    Err(invalid(path, "PNG support requires the `png` feature"))
}

/// RGB to full-range BT.601 YCbCr; chroma is centred on 0.5.
pub fn rgb_to_ycbcr(rgb: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_image_shape(rgb, &[3])?;
    let s = rgb.shape();
    Ok(Tensor::from_fn(s, |_, c, y, x| {
        let (r, g, b) = (rgb.at(0, 0, y, x), rgb.at(0, 1, y, x), rgb.at(0, 2, y, x));
        match c {
            0 => 0.299 * r + 0.587 * g + 0.114 * b,
            1 => 0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
            _ => 0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
        }
    }))
}

pub fn ycbcr_to_rgb(ycc: &Tensor<f32>) -> Result<Tensor<f32>> {
    check_image_shape(ycc, &[3])?;
    let s = ycc.shape();
    Ok(Tensor::from_fn(s, |_, c, y, x| {
        let (l, cb, cr) = (ycc.at(0, 0, y, x), ycc.at(0, 1, y, x) - 0.5, ycc.at(0, 2, y, x) - 0.5);
        let v = match c {
            0 => l + 1.402 * cr,
            1 => l - 0.344_136 * cb - 0.714_136 * cr,
            _ => l + 1.772 * cb,
        };
        v.clamp(0.0, 1.0)
    }))
}

/// Luminance plane of an image plus the chroma planes of a colour image.
#[derive(Clone, Debug)]
pub struct SplitImage {
    pub luma: Tensor<f32>,
    pub chroma: Option<Tensor<f32>>,
}

pub fn split_luma(img: &Tensor<f32>) -> Result<SplitImage> {
    check_image_shape(img, &[1, 3])?;
    if img.shape().c() == 1 {
        return Ok(SplitImage { luma: img.clone(), chroma: None });
    }
    let ycc = rgb_to_ycbcr(img)?;
    let s = ycc.shape();
    let p = s.plane();
    Ok(SplitImage {
        luma: Tensor::new(s.with_c(1), ycc.data()[..p].to_vec())?,
        chroma: Some(Tensor::new(s.with_c(2), ycc.data()[p..].to_vec())?),
    })
}

/// Re-attaches chroma to a fused luminance plane, returning RGB.
pub fn merge_luma(luma: &Tensor<f32>, chroma: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (l, c) = (luma.shape(), chroma.shape());
    if l.c() != 1 || c.c() != 2 || l.h() != c.h() || l.w() != c.w() {
        return Err(Error::Dimension(format!("cannot merge luma {l} with chroma {c}")));
    }
    let mut data = luma.data().to_vec();
    data.extend_from_slice(chroma.data());
    ycbcr_to_rgb(&Tensor::new(l.with_c(3), data)?)
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Files in `dirs[0]` matched to the others by file stem, in stem order.
pub fn match_stems(dirs: &[&Path]) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let maps = dirs.iter().map(|d| stems(d)).collect::<Result<Vec<_>>>()?;
    let mut all: Vec<&String> = maps.iter().flat_map(|m| m.keys()).collect();
    all.sort();
    all.dedup();
    let missing: Vec<&str> = all
        .iter()
        .filter(|k| maps.iter().any(|m| !m.contains_key(**k)))
        .map(|k| k.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("stems without a counterpart in every directory: {}", missing.join(", "))));
    }
    Ok(all
        .into_iter()
        .map(|k| (k.clone(), maps.iter().map(|m| m[k].clone()).collect()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nfi_round_trip_is_bit_exact() {
        let t = Tensor::from_fn(Shape::new(1, 2, 3, 5), |_, c, y, x| (c as f32 - 0.3) * (y as f32 + 1.7).powi(x as i32));
        let back = decode_nfi(&encode_nfi(&t).unwrap()).unwrap();
        assert_eq!(t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn nfi_truncation_is_rejected() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let mut b = encode_nfi(&t).unwrap();
        b.pop();
        assert!(decode_nfi(&b).is_err());
    }

    #[test]
    fn eight_bit_levels_round_trip() {
        let t = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| (y * 16 + x) as f32 / 255.0);
        let back = decode_pnm(&encode_pnm(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.at(0, 0, 15, 15), 1.0);
        assert_eq!(back.at(0, 0, 0, 0), 0.0);
    }

    #[test]
    fn ascii_pnm_with_comments() {
        let src = b"P3\n# a comment\n2 1\n255\n255 0 0  0 0 255\n";
        let t = decode_pnm(src).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 2, 0, 1), 1.0);
    }

    #[test]
    fn red_has_bt601_luma() {
        let red = Tensor::from_fn(Shape::new(1, 3, 1, 1), |_, c, _, _| if c == 0 { 1.0 } else { 0.0 });
        let ycc = rgb_to_ycbcr(&red).unwrap();
        assert!((ycc.at(0, 0, 0, 0) - 0.299).abs() < 1e-7);
        let back = ycbcr_to_rgb(&ycc).unwrap();
        assert!(back.max_abs_diff(&red).unwrap() < 1e-5);
    }
}
