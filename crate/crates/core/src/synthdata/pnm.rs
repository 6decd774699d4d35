//! Binary netpbm codec: P6 RGB and P5 grey at 8 or 16 bits.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Row-major interleaved samples.
    pub samples: Vec<u16>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            out.extend(self.samples.iter().flat_map(|v| v.to_be_bytes()));
        } else {
            out.extend(self.samples.iter().map(|&v| v as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message: message.to_string(),
        };
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(fail(0, "expected magic P5 or P6")),
        };
        let mut pos = 2;
        let mut field = |what: &str| -> Result<usize> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            if start == pos {
                return Err(fail(start, &format!("expected {what}")));
            }
            std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| fail(start, &format!("{what} out of range")))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if width == 0 || height == 0 {
            return Err(fail(pos, "zero image dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(fail(pos, "maxval must be in 1..=65535"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail(pos, "expected single whitespace before raster"));
        }
        pos += 1;
        let n = width * height * channels;
        let wide = maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(fail(
                bytes.len(),
                &format!("truncated raster: {} of {need} bytes", raster.len()),
            ));
        }
        if raster.len() > need {
            return Err(fail(pos + need, "trailing bytes after raster"));
        }
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if let Some(i) = samples.iter().position(|&v| v as usize > maxval) {
            return Err(fail(pos + i * if wide { 2 } else { 1 }, "sample exceeds maxval"));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}
