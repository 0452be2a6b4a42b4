//! Netpbm grayscale (PGM, P2/P5) and color (PPM, P3/P6) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded Netpbm image; `channels` is 1 for PGM and 3 for PPM.
#[derive(Clone, Debug, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub channels: usize,
    /// Row-major samples, `channels` per pixel.
    pub samples: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn line(&self) -> usize {
        1 + self.bytes[..self.pos.min(self.bytes.len())]
            .iter()
            .filter(|b| **b == b'\n')
            .count()
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::parse(self.origin, self.line(), message)
    }

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

    fn token(&mut self) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("unexpected end of file"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| self.error("non-ASCII token"))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| self.error(format!("invalid {what} '{tok}'")))
    }
}

pub fn decode_pnm(bytes: &[u8], origin: &str) -> Result<PnmImage> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        origin,
    };
    let magic = cur.token()?;
    let (channels, binary) = match magic {
        "P2" => (1, false),
        "P5" => (1, true),
        "P3" => (3, false),
        "P6" => (3, true),
        other => return Err(cur.error(format!("unsupported magic '{other}'"))),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.error("image dimensions must be positive"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(cur.error(format!("maxval {maxval} out of range")));
    }
    let count = width * height * channels;
    let mut samples = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        cur.pos += 1;
        let wide = maxval > 255;
        let needed = count * if wide { 2 } else { 1 };
        let raster = bytes.get(cur.pos..cur.pos + needed).ok_or_else(|| {
            cur.error(format!(
                "raster truncated: need {needed} bytes, have {}",
                bytes.len().saturating_sub(cur.pos)
            ))
        })?;
        if wide {
            samples.extend(raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])));
        } else {
            samples.extend(raster.iter().map(|&b| u16::from(b)));
        }
    } else {
        for _ in 0..count {
            let v = cur.number("sample")?;
            if v > maxval {
                return Err(cur.error(format!("sample {v} exceeds maxval {maxval}")));
            }
            samples.push(v as u16);
        }
    }
    if let Some(bad) = samples.iter().find(|&&s| usize::from(s) > maxval) {
        return Err(cur.error(format!("sample {bad} exceeds maxval {maxval}")));
    }
    Ok(PnmImage {
        width,
        height,
        maxval: maxval as u16,
        channels,
        samples,
    })
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<PnmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes, &path.display().to_string())
}

/// Encodes as binary P5/P6, 16-bit big-endian when `maxval > 255`.
pub fn encode_pnm(image: &PnmImage) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!(
        "{magic}\n{} {}\n{}\n",
        image.width, image.height, image.maxval
    )
    .into_bytes();
    if image.maxval > 255 {
        for s in &image.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(image.samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn write_pnm(image: &PnmImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)).map_err(|e| Error::io(path, e))
}
