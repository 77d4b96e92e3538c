//! Binary PPM (P6) and PGM (P5) with maxval 255.

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM; interleaved row-major bytes.
    pub channels: usize,
    pub bytes: Vec<u8>,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.bytes);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> CoreError {
        CoreError::Parse {
            file: self.file.to_string(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
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
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("bad {what}")))
    }
}

/// Parses a P5 or P6 file; `file` names the source in error messages.
pub fn decode(buf: &[u8], file: &str) -> Result<Raster> {
    Ok(decode_with_offset(buf, file)?.0)
}

/// Also returns the byte offset of the first raster byte.
pub fn decode_with_offset(buf: &[u8], file: &str) -> Result<(Raster, usize)> {
    let mut c = Cursor { buf, pos: 0, file };
    if buf.len() < 2 {
        return Err(c.err("missing magic"));
    }
    let channels = match &buf[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => return Err(c.err("expected P5 or P6 magic")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(c.err(format!("maxval {maxval} unsupported (need 255)")));
    }
    if c.pos >= buf.len() || !buf[c.pos].is_ascii_whitespace() {
        return Err(c.err("expected single whitespace before raster"));
    }
    c.pos += 1;
    let need = width * height * channels;
    if buf.len() - c.pos < need {
        c.pos = buf.len();
        return Err(c.err(format!("raster truncated, need {need} bytes")));
    }
    let raster = Raster {
        width,
        height,
        channels,
        bytes: buf[c.pos..c.pos + need].to_vec(),
    };
    Ok((raster, c.pos))
}
