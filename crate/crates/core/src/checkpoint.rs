//! Checkpoint files: a `key=value` text header followed by named `f32`
//! tensors, all little-endian.
//!
//! ```text
//! "TSVC"  u16 version  u32 header_len  header (UTF-8 lines "key=value")
//! u32 count, then per tensor:
//!   u16 name_len  name  u8 rank  u32 dims[rank]  f32 values[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use crate::embedding::DayIndex;
use crate::error::{Error, Result};
use crate::model::{InputNorm, TsvitConfig, TsvitModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSVC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header: String = self
            .header
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, not a checkpoint"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(
                4,
                format!("unsupported checkpoint version {version} (expected {VERSION})"),
            ));
        }
        let hlen = r.u32()? as usize;
        let at = r.pos;
        let text =
            std::str::from_utf8(r.take(hlen)?).map_err(|_| r.error(at, "header is not UTF-8"))?;
        let mut header = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.error(at, format!("header line without '=': {line}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.error(at, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let at = r.pos;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| r.error(at, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| r.error(at, e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!(
                    "truncated: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
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

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

const DATE_KEYS: &str = "date_keys";
const INPUT_MEAN: &str = "input_mean";
const INPUT_STD: &str = "input_std";

/// Shortest round-tripping decimal form of each value.
fn join_floats(v: &[f32]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_floats(key: &str, s: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Compatibility(format!("bad {key} value '{v}'")))
        })
        .collect()
}

/// Header and parameter tensors describing `model`.
pub fn model_checkpoint(model: &TsvitModel) -> Checkpoint {
    let mut header: Vec<(String, String)> = model
        .config()
        .to_kv()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let keys: Vec<String> = model
        .temporal_pe
        .keys()
        .iter()
        .map(|d| d.to_string())
        .collect();
    header.push((DATE_KEYS.into(), keys.join(",")));
    if let Some(norm) = model.input_norm() {
        header.push((INPUT_MEAN.into(), join_floats(&norm.mean)));
        header.push((INPUT_STD.into(), join_floats(&norm.std)));
    }
    let tensors = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Checkpoint { header, tensors }
}

/// Rebuilds a model from a checkpoint. Extra tensors (optimiser state) are
/// ignored; missing or mis-shaped parameters are a compatibility error.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<TsvitModel> {
    let config = TsvitConfig::from_kv(
        ckpt.header
            .iter()
            .filter(|(k, _)| TsvitConfig::KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str())),
    )
    .map_err(|e| Error::Compatibility(format!("checkpoint config: {e}")))?;
    let keys: Vec<DayIndex> = ckpt
        .header_value(DATE_KEYS)
        .ok_or_else(|| Error::Compatibility("checkpoint has no date_keys".into()))?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Compatibility(format!("bad date key '{s}'")))
        })
        .collect::<Result<_>>()?;
    let mut model = TsvitModel::new(config, &keys, 0)?;
    let norm = match (ckpt.header_value(INPUT_MEAN), ckpt.header_value(INPUT_STD)) {
        (Some(m), Some(s)) => Some(InputNorm {
            mean: parse_floats(INPUT_MEAN, m)?,
            std: parse_floats(INPUT_STD, s)?,
        }),
        (None, None) => None,
        _ => {
            return Err(Error::Compatibility(
                "checkpoint has only half of the input statistics".into(),
            ))
        }
    };
    model
        .set_input_norm(norm)
        .map_err(|e| Error::Compatibility(e.to_string()))?;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        let t = ckpt
            .tensor(&name)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks parameter {name}")))?;
        model
            .params_mut()
            .set(id, t.clone())
            .map_err(|e| Error::Compatibility(e.to_string()))?;
    }
    Ok(model)
}

pub fn save_model(model: &TsvitModel, path: &Path) -> Result<()> {
    model_checkpoint(model).save(path)
}

pub fn load_model(path: &Path) -> Result<TsvitModel> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

/// Loads a model and checks it was trained with `expected`.
pub fn load_model_for(path: &Path, expected: &TsvitConfig) -> Result<TsvitModel> {
    let model = load_model(path)?;
    if model.config() != expected {
        let diff: Vec<String> = model
            .config()
            .to_kv()
            .into_iter()
            .zip(expected.to_kv())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: checkpoint {} vs config {}", a.0, a.1, b.1))
            .collect();
        return Err(Error::Compatibility(diff.join("; ")));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::PatchSize;

    fn toy() -> TsvitModel {
        let cfg = TsvitConfig {
            num_classes: 3,
            dim: 8,
            temporal_depth: 1,
            spatial_depth: 1,
            heads: 2,
            patch: PatchSize { t: 1, h: 2, w: 2 },
            input_t: 3,
            height: 4,
            width: 4,
            channels: 2,
            ..TsvitConfig::default()
        };
        TsvitModel::new(cfg, &[3, 40, 77], 5).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = toy();
        let ck = model_checkpoint(&m);
        let back = model_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(back.temporal_pe.keys(), m.temporal_pe.keys());
    }

    #[test]
    fn input_statistics_survive_the_round_trip() {
        let mut m = toy();
        m.set_input_norm(Some(InputNorm {
            mean: vec![0.1, -3.25e-7],
            std: vec![0.3, 1.0 / 3.0],
        }))
        .unwrap();
        let back = model_from_checkpoint(&model_checkpoint(&m)).unwrap();
        assert_eq!(back.input_norm(), m.input_norm());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = model_checkpoint(&toy()).to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_bump_rejected() {
        let mut bytes = model_checkpoint(&toy()).to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn config_mismatch_is_a_compatibility_error() {
        let m = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&m, &path).unwrap();
        let mut other = m.config().clone();
        other.dim = 16;
        assert!(matches!(
            load_model_for(&path, &other),
            Err(Error::Compatibility(_))
        ));
        assert!(load_model_for(&path, m.config()).is_ok());
    }
}
