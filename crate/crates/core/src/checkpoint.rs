//! Binary checkpoint format.
//!
//! ```text
//! "RISCKPT" u32:version
//! u32:count { u32:name_len name u8:dtype u32:rank u64:extent* payload }   parameters
//! u64:step f64:beta1 f64:beta2 f64:eps u32:count { record }                optimizer (count 0 = absent)
//! u32:json_len json                                                          metadata
//! u32:crc32 of everything before it
//! ```
//!
//! All integers and payloads are little-endian; payloads are row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{DType, Real, Tensor};
use crate::trainer::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 7] = b"RISCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub adam: Option<AdamState<T>>,
    pub meta: CheckpointMeta,
}

fn put_record<T: Real>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Checkpoint(what.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated file"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| corrupt("record name is not UTF-8"))?;
        let tag = self.u8()?;
        let dtype =
            DType::from_tag(tag).ok_or_else(|| corrupt(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(corrupt(format!(
                "{name} is stored as {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let bytes = self.take(count * dtype.size_of())?;
        let data = bytes
            .chunks_exact(dtype.size_of())
            .map(T::read_le)
            .collect();
        Ok((name, Tensor::from_vec(&shape, data)?))
    }
}

/// Element type of a checkpoint file, read from its first record.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    header(&mut r)?;
    if r.u32()? == 0 {
        return Err(corrupt("checkpoint has no parameters"));
    }
    let len = r.u32()? as usize;
    r.take(len)?;
    let tag = r.u8()?;
    DType::from_tag(tag).ok_or_else(|| corrupt(format!("unknown dtype tag {tag}")))
}

fn header(r: &mut Reader<'_>) -> Result<()> {
    if r.take(MAGIC.len())? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    Ok(())
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend(MAGIC);
        buf.extend(VERSION.to_le_bytes());
        let named = self.params.named();
        buf.extend((named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            put_record(&mut buf, name, t);
        }
        match &self.adam {
            Some(a) => {
                buf.extend(a.step.to_le_bytes());
                for v in [a.beta1, a.beta2, a.eps] {
                    buf.extend(v.to_le_bytes());
                }
                buf.extend((2 * named.len() as u32).to_le_bytes());
                for ((name, _), m) in named.iter().zip(&a.m) {
                    put_record(&mut buf, &format!("m/{name}"), m);
                }
                for ((name, _), v) in named.iter().zip(&a.v) {
                    put_record(&mut buf, &format!("v/{name}"), v);
                }
            }
            None => {
                buf.extend(0u64.to_le_bytes());
                for _ in 0..3 {
                    buf.extend(0f64.to_le_bytes());
                }
                buf.extend(0u32.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta)?;
        buf.extend((json.len() as u32).to_le_bytes());
        buf.extend(&json);
        let crc = crc32fast::hash(&buf);
        buf.extend(crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(corrupt("truncated file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("CRC mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        header(&mut r)?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(r.record::<T>()?);
        }
        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let opt_count = r.u32()? as usize;
        let mut opt = Vec::with_capacity(opt_count);
        for _ in 0..opt_count {
            opt.push(r.record::<T>()?);
        }
        let json_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before CRC"));
        }

        let mut params = ModelParams::<T>::zeros(&meta.model)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != records.len() {
            return Err(corrupt(format!(
                "{} parameter records, config expects {}",
                records.len(),
                names.len()
            )));
        }
        for ((slot, expected), (name, t)) in
            params.tensors_mut().into_iter().zip(&names).zip(records)
        {
            if &name != expected || t.shape() != slot.shape() {
                return Err(corrupt(format!(
                    "record {name} {:?} does not fit {expected} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let adam = if opt_count == 0 {
            None
        } else {
            if opt_count != 2 * names.len() {
                return Err(corrupt("optimizer record count"));
            }
            let (m, v): (Vec<_>, Vec<_>) = opt
                .into_iter()
                .enumerate()
                .partition(|(i, _)| *i < names.len());
            let strip =
                |part: Vec<(usize, (String, Tensor<T>))>, prefix: &str| -> Result<Vec<Tensor<T>>> {
                    part.into_iter()
                        .zip(&names)
                        .map(|((_, (name, t)), expected)| {
                            if name != format!("{prefix}/{expected}") {
                                return Err(corrupt(format!("unexpected optimizer record {name}")));
                            }
                            Ok(t)
                        })
                        .collect()
                };
            let state = AdamState {
                m: strip(m, "m")?,
                v: strip(v, "v")?,
                step,
                beta1,
                beta2,
                eps,
            };
            state.check(&params)?;
            Some(state)
        };
        Ok(Checkpoint { params, adam, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails when the stored model does not match `cfg`.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.meta.model != cfg {
            return Err(Error::Checkpoint(format!(
                "checkpoint model {:?} differs from requested {:?}",
                self.meta.model, cfg
            )));
        }
        self.params.check_config(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{init_params, Trainer};

    fn small() -> ModelConfig {
        ModelConfig {
            channels: 3,
            fcn_kernels: vec![3, 3],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_both_precisions() {
        let t64 = Trainer::<f64>::new(small(), TrainConfig::default()).unwrap();
        let c = t64.checkpoint();
        let back = Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);

        let t32 = Trainer::<f32>::new(small(), TrainConfig::default()).unwrap();
        let c = t32.checkpoint();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn without_optimizer() {
        let c = Checkpoint {
            params: init_params::<f64>(&small(), 1).unwrap(),
            adam: None,
            meta: Trainer::<f64>::new(small(), TrainConfig::default())
                .unwrap()
                .checkpoint()
                .meta,
        };
        assert_eq!(
            Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap(),
            c
        );
    }

    #[test]
    fn corruption_is_detected() {
        let c = Trainer::<f64>::new(small(), TrainConfig::default())
            .unwrap()
            .checkpoint();
        let mut bytes = c.to_bytes().unwrap();
        bytes[40] ^= 1;
        let err = Checkpoint::<f64>::from_bytes(&bytes)
            .unwrap_err()
            .to_string();
        assert!(err.contains("CRC"), "{err}");
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..20]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"RISCKPZ\x01\0\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn version_is_checked() {
        let c = Trainer::<f64>::new(small(), TrainConfig::default())
            .unwrap()
            .checkpoint();
        let mut bytes = c.to_bytes().unwrap();
        bytes[7] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::<f64>::from_bytes(&bytes)
            .unwrap_err()
            .to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn model_mismatch() {
        let c = Trainer::<f64>::new(small(), TrainConfig::default())
            .unwrap()
            .checkpoint();
        let other = ModelConfig {
            channels: 5,
            ..small()
        };
        assert!(c.check_model(&other).is_err());
        c.check_model(&small()).unwrap();
    }

    #[test]
    fn file_round_trip_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = Trainer::<f32>::new(small(), TrainConfig::default())
            .unwrap()
            .checkpoint();
        c.save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), DType::F32);
        assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), c);
    }
}
