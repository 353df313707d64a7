//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Grid2D, Volume3D};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 3-channel volume with values in `[0, 1]` as P6.
pub fn encode_ppm(image: &Volume3D) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::shape("encode_ppm", 3, image.channels()));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(image.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

/// Encodes a grid with values in `[0, 1]` as P5.
pub fn encode_pgm(grid: &Grid2D) -> Vec<u8> {
    let (h, w) = grid.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(grid.values().iter().map(|&v| to_byte(v)));
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> HeaderReader<'a> {
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

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(self.file, field, start, "expected a decimal integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(self.file, field, start, "integer out of range"))
    }
}

fn decode(bytes: &[u8], file: &str, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(
            file,
            "magic",
            0,
            format!("expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut r = HeaderReader { bytes, pos: 2, file };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval_at = r.pos;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(file, "maxval", maxval_at, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(file, "width", 2, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::parse(file, "raster", r.pos, "missing header terminator"));
    }
    let data = &bytes[r.pos + 1..];
    let needed = width * height * channels;
    if data.len() < needed {
        return Err(Error::parse(
            file,
            "raster",
            r.pos + 1 + data.len(),
            format!("truncated raster: {} of {needed} bytes", data.len()),
        ));
    }
    Ok((height, width, data[..needed].iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn decode_ppm(bytes: &[u8], file: &str) -> Result<Volume3D> {
    let (h, w, interleaved) = decode(bytes, file, b"P6", 3)?;
    let mut vol = Volume3D::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                vol.set(c, y, x, interleaved[(y * w + x) * 3 + c]);
            }
        }
    }
    Ok(vol)
}

pub fn decode_pgm(bytes: &[u8], file: &str) -> Result<Grid2D> {
    let (h, w, values) = decode(bytes, file, b"P5", 1)?;
    Grid2D::from_vec(h, w, values)
}

pub fn write_ppm(path: &Path, image: &Volume3D) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, grid: &Grid2D) -> Result<()> {
    std::fs::write(path, encode_pgm(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Grid2D> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn read_ppm(path: &Path) -> Result<Volume3D> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}
