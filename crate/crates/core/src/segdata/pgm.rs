//! Binary greyscale PGM (P5, maxval 255) for masks and intensity images.

use std::fs;
use std::path::Path;

use super::MaskBatch;
use crate::error::{Error, Result};

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, field: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(field, "expected an unsigned decimal integer"));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(field, "integer out of range"))
    }
}

/// Parses a P5 byte stream into `(width, height, pixels)`.
pub fn parse_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if data.len() < 2 {
        return Err(Error::format("magic", "file too short"));
    }
    match &data[..2] {
        b"P5" => {}
        b"P2" => return Err(Error::format("magic", "ASCII PGM unsupported (P2); use binary P5")),
        other => {
            return Err(Error::format(
                "magic",
                format!("expected \"P5\", found {:?}", String::from_utf8_lossy(other)),
            ))
        }
    }
    let mut cur = Cursor { data, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 {
        return Err(Error::format("width", "must be positive"));
    }
    if height == 0 {
        return Err(Error::format("height", "must be positive"));
    }
    if maxval != 255 {
        return Err(Error::format("maxval", format!("expected 255, found {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match data.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::format("maxval", "missing whitespace after maxval")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("width", "image too large"))?;
    let payload = &data[cur.pos..];
    if payload.len() < n {
        return Err(Error::format(
            "payload",
            format!("truncated: expected {n} bytes, found {}", payload.len()),
        ));
    }
    Ok((width, height, payload[..n].to_vec()))
}

/// Encodes one image as a P5 byte stream.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<MaskBatch> {
    let (width, height, pixels) = read_grey_pgm(path)?;
    MaskBatch::new(pixels, width, height, 1)
}

pub fn write_mask_pgm(mask: &MaskBatch, path: impl AsRef<Path>) -> Result<()> {
    if mask.n_images != 1 {
        return Err(Error::Precondition(format!(
            "write_mask_pgm takes a single image, got {}",
            mask.n_images
        )));
    }
    write_grey_pgm(mask.width, mask.height, &mask.labels, path)
}

pub fn read_grey_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    parse_pgm(&data)
}

pub fn write_grey_pgm(width: usize, height: usize, pixels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let path = path.as_ref();
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|e| Error::io_at(path, e))
}
