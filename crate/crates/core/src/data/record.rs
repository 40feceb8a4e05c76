//! Binary sample files.
//!
//! ```text
//! "SITS"  u16 version
//! u16 T  u16 H  u16 W  u16 C  u8 label_kind (0 pixels, 1 class)
//! u16 dates[T]
//! f32 raster[T·H·W·C]   row-major [T, H, W, C]
//! u16 labels[H·W] or u16 label
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::embedding::{DayIndex, SitsTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{Example, Target};

pub const MAGIC: &[u8; 4] = b"SITS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    /// Row-major `H·W` class indices.
    Pixels(Vec<u16>),
    Class(u16),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SitsRecord {
    pub sits: SitsTensor,
    pub labels: Labels,
}

impl SitsRecord {
    pub fn new(sits: SitsTensor, labels: Labels) -> Result<Self> {
        let (_, h, w, _) = sits.dims();
        if let Labels::Pixels(l) = &labels {
            if l.len() != h * w {
                return Err(Error::Data(format!(
                    "{} pixel labels for a {h}x{w} grid",
                    l.len()
                )));
            }
        }
        for (i, d) in [sits.dims().0, h, w, sits.dims().3].into_iter().enumerate() {
            if d > u16::MAX as usize {
                return Err(Error::Data(format!(
                    "dimension {i} ({d}) does not fit the file format"
                )));
            }
        }
        Ok(Self { sits, labels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (t, h, w, c) = self.sits.dims();
        let mut out = Vec::with_capacity(16 + 2 * t + 4 * t * h * w * c + 2 * h * w);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [t, h, w, c] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        out.push(match self.labels {
            Labels::Pixels(_) => 0,
            Labels::Class(_) => 1,
        });
        for d in self.sits.dates() {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in self.sits.values().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &self.labels {
            Labels::Pixels(l) => l
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Labels::Class(v) => out.extend_from_slice(&v.to_le_bytes()),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err(0, "bad magic, not a SITS sample"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(format_err(
                4,
                format!("unsupported sample version {version} (expected {VERSION})"),
            ));
        }
        let dims_at = r.pos;
        let (t, h, w, c) = (
            r.u16()? as usize,
            r.u16()? as usize,
            r.u16()? as usize,
            r.u16()? as usize,
        );
        if t * h * w * c == 0 {
            return Err(format_err(dims_at, format!("empty raster {t}x{h}x{w}x{c}")));
        }
        let kind_at = r.pos;
        let kind = r.take(1)?[0];
        if kind > 1 {
            return Err(format_err(kind_at, format!("unknown label kind {kind}")));
        }
        let dates_at = r.pos;
        let dates: Vec<DayIndex> = r
            .take(2 * t)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        let raster: Vec<f32> = r
            .take(4 * t * h * w * c)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels = if kind == 0 {
            Labels::Pixels(
                r.take(2 * h * w)?
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            )
        } else {
            Labels::Class(r.u16()?)
        };
        if r.pos != bytes.len() {
            return Err(format_err(
                r.pos,
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        let values =
            Tensor::new(&[t, h, w, c], raster).map_err(|e| format_err(dims_at, e.to_string()))?;
        let sits =
            SitsTensor::new(values, dates).map_err(|e| format_err(dates_at, e.to_string()))?;
        Ok(Self { sits, labels })
    }

    /// Training view; labels are widened to `usize` unchanged.
    pub fn to_example(&self) -> Example {
        let target = match &self.labels {
            Labels::Pixels(l) => Target::Pixels(l.iter().map(|&v| v as usize).collect()),
            Labels::Class(v) => Target::Class(*v as usize),
        };
        Example {
            sits: self.sits.clone(),
            target,
        }
    }
}

pub fn write_sample(record: &SitsRecord, path: &Path) -> Result<()> {
    fs::write(path, record.to_bytes())?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<SitsRecord> {
    SitsRecord::from_bytes(&fs::read(path)?)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(format_err(
                self.pos,
                format!("truncated: need {n} bytes, {left} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
