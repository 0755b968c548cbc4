//! `.capv` capacitive sequence files.
//!
//! ```text
//! "CAPV" | version u16 | cols u16 | rows u16 | frames u32 | fps f32
//! per frame: timestamp_ms u64 | rows * cols bytes, row-major
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::CapFrame;
use crate::error::{Error, Result};

pub const CAPV_MAGIC: &[u8; 4] = b"CAPV";
pub const CAPV_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CapSequence {
    pub cols: usize,
    pub rows: usize,
    pub fps: f32,
    pub frames: Vec<CapFrame>,
}

impl CapSequence {
    pub fn new(cols: usize, rows: usize, fps: f32, frames: Vec<CapFrame>) -> Result<Self> {
        let seq = CapSequence {
            cols,
            rows,
            fps,
            frames,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols > u16::MAX as usize || self.rows > u16::MAX as usize {
            return Err(Error::InvalidInput("frame dimensions exceed u16".into()));
        }
        let mut last = 0;
        for (i, f) in self.frames.iter().enumerate() {
            if f.cols != self.cols || f.rows != self.rows || f.grid.len() != self.cols * self.rows {
                return Err(Error::InvalidInput(format!(
                    "frame {i} is {}x{}, sequence is {}x{}",
                    f.cols, f.rows, self.cols, self.rows
                )));
            }
            if f.timestamp_ms < last {
                return Err(Error::InvalidInput(format!(
                    "frame {i} timestamp {} precedes {last}",
                    f.timestamp_ms
                )));
            }
            last = f.timestamp_ms;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let cells = self.cols * self.rows;
        let mut out = Vec::with_capacity(HEADER_LEN + self.frames.len() * (8 + cells));
        out.extend_from_slice(CAPV_MAGIC);
        out.extend_from_slice(&CAPV_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.cols as u16).to_le_bytes());
        out.extend_from_slice(&(self.rows as u16).to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        for f in &self.frames {
            out.extend_from_slice(&f.timestamp_ms.to_le_bytes());
            out.extend_from_slice(&f.grid);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != CAPV_MAGIC {
            return Err(bad("missing CAPV magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != CAPV_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let cols = u16_at(6) as usize;
        let rows = u16_at(8) as usize;
        let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let fps = f32::from_le_bytes(bytes[14..18].try_into().unwrap());
        let stride = 8 + cols * rows;
        let expect = HEADER_LEN + count * stride;
        if bytes.len() != expect {
            return Err(bad(format!(
                "{count} frames of {cols}x{rows} need {expect} bytes, file has {}",
                bytes.len()
            )));
        }
        let frames = bytes[HEADER_LEN..]
            .chunks(stride)
            .map(|chunk| CapFrame {
                cols,
                rows,
                grid: chunk[8..].to_vec(),
                timestamp_ms: u64::from_le_bytes(chunk[..8].try_into().unwrap()),
            })
            .collect();
        let seq = CapSequence {
            cols,
            rows,
            fps,
            frames,
        };
        seq.validate().map_err(|e| bad(e.to_string()))?;
        Ok(seq)
    }
}

pub fn write_capv(path: &Path, seq: &CapSequence) -> Result<()> {
    fs::write(path, seq.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_capv(path: &Path) -> Result<CapSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CapSequence::from_bytes(&bytes, path)
}
