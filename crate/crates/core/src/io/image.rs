//! Bit-exact image containers.
//!
//! * `pgm16`: binary P5, maxval 65535, big-endian samples, single channel.
//! * `rawf32`: `DISP`, version byte, `H W C` as little-endian u32, then
//!   little-endian f32 samples in row-major `H×W×C` order.
//! * `ppm8`: binary P6 for viewing; grayscale is replicated to RGB.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub const RAWF32_MAGIC: &[u8; 4] = b"DISP";
pub const RAWF32_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pgm16,
    Rawf32,
    Ppm8,
}

impl ImageFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pgm16" => Ok(ImageFormat::Pgm16),
            "rawf32" => Ok(ImageFormat::Rawf32),
            "ppm8" => Ok(ImageFormat::Ppm8),
            other => Err(Error::Config(format!(
                "unknown image format `{other}` (pgm16, rawf32, ppm8)"
            ))),
        }
    }

    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => Ok(ImageFormat::Pgm16),
            Some("raw") | Some("rawf32") | Some("disp") => Ok(ImageFormat::Rawf32),
            Some("ppm") => Ok(ImageFormat::Ppm8),
            _ => Err(Error::Config(format!(
                "cannot infer image format from `{}`",
                path.display()
            ))),
        }
    }
}

fn chw(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::dim(
            "encode_image",
            format!("expected non-empty C×H×W image, got {:?}", img.shape()),
        )),
    }
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_image(img: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    let (c, h, w) = chw(img)?;
    let d = img.data();
    match format {
        ImageFormat::Pgm16 => {
            if c != 1 {
                return Err(Error::dim(
                    "encode_image",
                    format!("pgm16 needs 1 channel, got {c}"),
                ));
            }
            let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
            out.reserve(2 * h * w);
            for &v in d {
                out.extend_from_slice(&to_u16(v).to_be_bytes());
            }
            Ok(out)
        }
        ImageFormat::Ppm8 => {
            if c != 1 && c != 3 {
                return Err(Error::dim(
                    "encode_image",
                    format!("ppm8 needs 1 or 3 channels, got {c}"),
                ));
            }
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.reserve(3 * h * w);
            for i in 0..h * w {
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    out.push(to_u8(d[src * h * w + i]));
                }
            }
            Ok(out)
        }
        ImageFormat::Rawf32 => {
            let mut out = Vec::with_capacity(17 + 4 * c * h * w);
            out.extend_from_slice(RAWF32_MAGIC);
            out.push(RAWF32_VERSION);
            for n in [h, w, c] {
                out.extend_from_slice(&(n as u32).to_le_bytes());
            }
            for i in 0..h * w {
                for ch in 0..c {
                    out.extend_from_slice(&(d[ch * h * w + i] as f32).to_le_bytes());
                }
            }
            Ok(out)
        }
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Minimal PNM header reader that tracks byte positions.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| fmt_err(start, format!("{what} out of range")))
    }
}

fn parse_pnm(bytes: &[u8], magic: &[u8; 2], maxval: usize) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt_err(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut hd = Header { bytes, pos: 2 };
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let mpos = {
        hd.skip_space();
        hd.pos
    };
    let m = hd.number("maxval")?;
    if m != maxval {
        return Err(fmt_err(mpos, format!("maxval {m}, expected {maxval}")));
    }
    if hd.pos >= bytes.len() || !bytes[hd.pos].is_ascii_whitespace() {
        return Err(fmt_err(hd.pos, "missing whitespace after maxval"));
    }
    if w == 0 || h == 0 {
        return Err(fmt_err(2, "zero image dimension"));
    }
    Ok((w, h, hd.pos + 1))
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<Tensor> {
    match format {
        ImageFormat::Pgm16 => {
            let (w, h, start) = parse_pnm(bytes, b"P5", 65535)?;
            let need = start + 2 * w * h;
            if bytes.len() < need {
                return Err(fmt_err(
                    bytes.len(),
                    format!("truncated: {need} bytes expected"),
                ));
            }
            let data = bytes[start..need]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
                .collect();
            Tensor::new(vec![1, h, w], data)
        }
        ImageFormat::Ppm8 => {
            let (w, h, start) = parse_pnm(bytes, b"P6", 255)?;
            let need = start + 3 * w * h;
            if bytes.len() < need {
                return Err(fmt_err(
                    bytes.len(),
                    format!("truncated: {need} bytes expected"),
                ));
            }
            let px = &bytes[start..need];
            let mut data = vec![0.0; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    data[ch * h * w + i] = px[3 * i + ch] as f64 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
        ImageFormat::Rawf32 => {
            if bytes.len() < 4 || &bytes[..4] != RAWF32_MAGIC {
                return Err(fmt_err(0, "expected magic DISP"));
            }
            if bytes.len() < 5 {
                return Err(fmt_err(bytes.len(), "truncated before version"));
            }
            if bytes[4] != RAWF32_VERSION {
                return Err(fmt_err(4, format!("unsupported version {}", bytes[4])));
            }
            if bytes.len() < 17 {
                return Err(fmt_err(bytes.len(), "truncated header"));
            }
            let dim = |o: usize| {
                u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
            };
            let (h, w, c) = (dim(5), dim(9), dim(13));
            if h == 0 || w == 0 || c == 0 {
                return Err(fmt_err(5, "zero image dimension"));
            }
            let need = h
                .checked_mul(w)
                .and_then(|n| n.checked_mul(c))
                .and_then(|n| n.checked_mul(4))
                .and_then(|n| n.checked_add(17))
                .ok_or_else(|| fmt_err(5, "dimensions overflow"))?;
            if bytes.len() < need {
                return Err(fmt_err(
                    bytes.len(),
                    format!("truncated: {need} bytes expected"),
                ));
            }
            if bytes.len() > need {
                return Err(fmt_err(need, "trailing bytes after payload"));
            }
            let mut data = vec![0.0; c * h * w];
            for (k, b) in bytes[17..].chunks_exact(4).enumerate() {
                let (i, ch) = (k / c, k % c);
                data[ch * h * w + i] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
            Tensor::new(vec![c, h, w], data)
        }
    }
}

pub fn load_image(path: &Path, format: ImageFormat) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?, format)
}

pub fn save_image(path: &Path, img: &Tensor, format: ImageFormat) -> Result<()> {
    std::fs::write(path, encode_image(img, format)?)?;
    Ok(())
}
