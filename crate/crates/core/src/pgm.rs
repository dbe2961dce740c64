//! Minimal PGM (P2 ASCII / P5 binary, 8 or 16 bit) reader and writer.
//!
//! Samples are mapped to `[0, 1]` by dividing by the header's maxval.

use std::path::Path;

use crate::error::{Error, Result};

/// A grayscale image with row-major samples in `[0, 1]` (not enforced).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }
}

struct Header {
    binary: bool,
    width: usize,
    height: usize,
    maxval: u32,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let binary = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P2") => false,
        _ => return Err(Error::format(path, "not a P2/P5 PGM file")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| Error::format(path, "malformed header number"))?;
    }
    // exactly one whitespace byte separates the header from binary data
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "missing whitespace after header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("invalid maxval {maxval}")));
    }
    Ok(Header {
        binary,
        width,
        height,
        maxval: maxval as u32,
        data_start: pos,
    })
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let h = parse_header(bytes, path)?;
    let count = h.width * h.height;
    let maxval = h.maxval as f64;
    let data = &bytes[h.data_start..];
    let samples: Vec<u32> = if h.binary {
        let wide = h.maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        if data.len() < need {
            return Err(Error::format(path, "truncated pixel data"));
        }
        if wide {
            data[..need]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            data[..count].iter().map(|&b| b as u32).collect()
        }
    } else {
        let text =
            std::str::from_utf8(data).map_err(|_| Error::format(path, "non-ASCII P2 body"))?;
        let mut out = Vec::with_capacity(count);
        for tok in text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_ascii_whitespace)
        {
            if out.len() == count {
                break;
            }
            out.push(
                tok.parse::<u32>()
                    .map_err(|_| Error::format(path, format!("bad sample `{tok}`")))?,
            );
        }
        if out.len() < count {
            return Err(Error::format(path, "truncated pixel data"));
        }
        out
    };
    if samples.iter().any(|&s| s > h.maxval) {
        return Err(Error::format(path, "sample exceeds maxval"));
    }
    GrayImage::new(
        h.width,
        h.height,
        samples.into_iter().map(|s| s as f64 / maxval).collect(),
    )
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

/// Encode as binary P5 with the given maxval (255 or 65535 are typical).
/// Values are clipped to `[0, 1]` and rounded.
pub fn encode_pgm(image: &GrayImage, maxval: u16) -> Vec<u8> {
    let maxval = maxval.max(1);
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).into_bytes();
    for &p in &image.pixels {
        let q = (p.clamp(0.0, 1.0) * maxval as f64).round() as u16;
        if maxval > 255 {
            out.extend_from_slice(&q.to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, image: &GrayImage, maxval: u16) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image, maxval)).map_err(|e| Error::io(path, e))
}
