//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! Writers emit the canonical header `P5\n<w> <h>\n255\n`. Readers accept any
//! whitespace and `#` comments between header fields, but insist on the
//! binary magic, maxval 255 and an exact payload length.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn magic(self) -> &'static [u8; 2] {
        match self {
            Kind::Gray => b"P5",
            Kind::Rgb => b"P6",
        }
    }

    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

/// Raw 8-bit raster, channels interleaved per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub bytes: Vec<u8>,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(r.bytes.len() + 20);
    out.extend_from_slice(r.kind.magic());
    out.extend_from_slice(format!("\n{} {}\n255\n", r.width, r.height).as_bytes());
    out.extend_from_slice(&r.bytes);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad {what} in header")))
    }
}

pub fn decode(buf: &[u8], kind: Kind) -> Result<Raster> {
    if buf.len() < 2 || &buf[..2] != kind.magic() {
        let found = String::from_utf8_lossy(&buf[..buf.len().min(2)]).into_owned();
        return Err(Error::Format(format!(
            "bad magic {found:?}, expected {}",
            String::from_utf8_lossy(kind.magic())
        )));
    }
    let mut cur = Cursor { buf, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} unsupported, expected 255")));
    }
    match buf.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("header must end with a single whitespace byte".into())),
    }
    let need = width * height * kind.channels();
    let payload = &buf[cur.pos..];
    if payload.len() < need {
        return Err(Error::Format(format!("truncated payload: {} of {} bytes", payload.len(), need)));
    }
    if payload.len() > need {
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - need)));
    }
    Ok(Raster { kind, width, height, bytes: payload.to_vec() })
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, kind: Kind) -> Result<Raster> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf, kind)
}

/// Maps a value in [-1, 1] to a byte via round((v+1)·127.5), clamped.
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}
