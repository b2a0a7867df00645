//! Binary PPM (P6) images and PGM (P5) label maps, 8 bits per sample.

use std::path::Path;

use dyndict_core::data::{LabelMap, RgbImage};
use dyndict_core::numerics::Tensor;

use crate::error::{FormatError, Result};
use crate::fsutil;

pub const MAXVAL: usize = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub width: usize,
    pub height: usize,
    /// Offset of the first payload byte.
    pub data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#` comments; errors unless at least one
    /// separator byte was consumed.
    fn separator(&mut self, after: &str) -> Result<(), FormatError> {
        let start = self.pos;
        loop {
            match self.peek() {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(b) = self.peek() {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(match self.peek() {
                None => FormatError::malformed(self.pos, format!("unexpected end of header after {after}")),
                Some(b) => FormatError::malformed(self.pos, format!("expected whitespace after {after}, found {}", show(b))),
            });
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize), FormatError> {
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(b) = self.peek().filter(u8::is_ascii_digit) {
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| FormatError::malformed(start, format!("{what} does not fit in 64 bits")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(match self.peek() {
                None => FormatError::malformed(start, format!("unexpected end of header, expected {what}")),
                Some(b) => FormatError::malformed(start, format!("expected {what}, found {}", show(b))),
            });
        }
        Ok((value, start))
    }
}

fn show(b: u8) -> String {
    if b.is_ascii_graphic() {
        format!("'{}'", b as char)
    } else {
        format!("byte 0x{b:02x}")
    }
}

/// Parses the header of a binary PNM with the given magic (`b"P6"` or
/// `b"P5"`) and checks the payload length for `channels` samples per pixel.
pub fn parse_header(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Header, FormatError> {
    let name = String::from_utf8_lossy(magic);
    if bytes.len() < 2 {
        return Err(FormatError::malformed(0, format!("file too short for the {name} magic")));
    }
    if &bytes[..2] != magic {
        return Err(FormatError::malformed(
            0,
            format!("expected magic {name}, found {:?}", String::from_utf8_lossy(&bytes[..2])),
        ));
    }
    let mut c = Cursor { bytes, pos: 2 };
    c.separator("magic")?;
    let (width, at) = c.number("width")?;
    if width == 0 {
        return Err(FormatError::malformed(at, "width must be positive"));
    }
    c.separator("width")?;
    let (height, at) = c.number("height")?;
    if height == 0 {
        return Err(FormatError::malformed(at, "height must be positive"));
    }
    c.separator("height")?;
    let (maxval, at) = c.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(FormatError::malformed(at, format!("maxval {maxval} outside 1..=65535")));
    }
    if maxval != MAXVAL {
        return Err(FormatError::Unsupported { offset: at, message: format!("maxval {maxval}, only 255 is supported") });
    }
    match c.peek() {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        Some(b) => return Err(FormatError::malformed(c.pos, format!("expected whitespace after maxval, found {}", show(b)))),
        None => return Err(FormatError::malformed(c.pos, "unexpected end of header after maxval")),
    }
    let data_offset = c.pos;
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| FormatError::malformed(at, "image dimensions overflow"))?;
    let have = bytes.len() - data_offset;
    if have < need {
        return Err(FormatError::malformed(bytes.len(), format!("payload truncated: expected {need} bytes, found {have}")));
    }
    if have > need {
        return Err(FormatError::malformed(data_offset + need, format!("{} trailing bytes after the payload", have - need)));
    }
    Ok(Header { width, height, data_offset })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, FormatError> {
    let h = parse_header(bytes, b"P6", 3)?;
    Ok(RgbImage { height: h.height, width: h.width, data: bytes[h.data_offset..].to_vec() })
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n{MAXVAL}\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Label maps keep class indices as raw sample values; 255 is the ignore
/// label.
pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap, FormatError> {
    let h = parse_header(bytes, b"P5", 1)?;
    LabelMap::new(h.height, h.width, bytes[h.data_offset..].to_vec())
        .map_err(|e| FormatError::malformed(h.data_offset, e.to_string()))
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{MAXVAL}\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.data());
    out
}

/// Reads a P6 file as a `3×H×W` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    Ok(read_rgb(path)?.to_tensor())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = fsutil::read(path)?;
    decode_ppm(&bytes).map_err(|e| e.at(path))
}

/// Writes a `3×H×W` tensor, quantized with `round(255·v)`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_rgb(path, &RgbImage::from_tensor(image)?)
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    fsutil::write_atomic(path, &encode_ppm(image))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fsutil::read(path)?;
    decode_pgm(&bytes).map_err(|e| e.at(path))
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    fsutil::write_atomic(path, &encode_pgm(map))
}
