//! Binary tensor container (`DTC1`) and training checkpoints.
//!
//! Layout: magic `DTC1`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank,
//! rank × u32 dims and row-major data, all little-endian; a trailing CRC32
//! covers every preceding byte.

use std::path::{Path, PathBuf};

use super::optim::OptimizerState;
use super::{SamplerState, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::VectorField;
use crate::objective::RunningMeanField;
use crate::params::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"DTC1";
pub const VERSION: u32 = 1;

const OPT_M: &str = "opt/m/";
const OPT_V: &str = "opt/v/";
const OPT_STEP: &str = "opt/step";
const EMA_MEAN: &str = "ema/mean";
const EMA_STEPS: &str = "ema/steps";
const META_RNG: &str = "meta/rng";

/// A stored tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.clone(),
        }
    }

    fn as_f32(&self, name: &str) -> Result<Tensor<f32>> {
        match self {
            StoredTensor::F32(t) => Ok(t.clone()),
            StoredTensor::F64(_) => Err(Error::invalid(format!("tensor `{name}` should be f32"))),
        }
    }
}

fn push_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let nb = name.as_bytes();
    let len = u16::try_from(nb.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(nb);
    out.push(T::DTYPE.code());
    out.push(u8::try_from(t.shape().len()).map_err(|_| Error::invalid("tensor rank above 255"))?);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tensor dim exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Serializes named tensors into the container format.
pub fn encode_tensors(entries: &[(String, StoredTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        match t {
            StoredTensor::F32(t) => push_tensor(&mut out, name, t)?,
            StoredTensor::F64(t) => push_tensor(&mut out, name, t)?,
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses the container, verifying magic, version and checksum first.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "file too short for a tensor container".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let t = &bytes[bytes.len() - 4..];
    let stored = u32::from_le_bytes([t[0], t[1], t[2], t[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let nl = c.take(2, "name length")?;
        let nl = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(nl, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let at = c.pos;
        let hdr = c.take(2, "dtype and rank")?;
        let dtype = DType::from_code(hdr[0]).ok_or_else(|| Error::Format {
            offset: at as u64,
            message: format!("unknown dtype code {}", hdr[0]),
        })?;
        let shape = (0..hdr[1])
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let at = c.pos;
        let raw = c.take(numel * dtype.size(), "tensor data")?;
        let bad_shape = |e: Error| Error::Format {
            offset: at as u64,
            message: format!("tensor `{name}`: {e}"),
        };
        let t = match dtype {
            DType::F32 => StoredTensor::F32(
                Tensor::new(
                    shape,
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                )
                .map_err(bad_shape)?,
            ),
            DType::F64 => StoredTensor::F64(
                Tensor::new(
                    shape,
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                        .collect(),
                )
                .map_err(bad_shape)?,
            ),
        };
        out.push((name, t));
    }
    if c.pos != body.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: "trailing bytes after the last tensor".into(),
        });
    }
    Ok(out)
}

pub fn write_tensor_file(path: impl AsRef<Path>, entries: &[(String, StoredTensor)]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensors(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<(String, StoredTensor)>> {
    let path = path.as_ref();
    decode_tensors(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub running_mean: RunningMeanField,
    pub optimizer: OptimizerState<f32>,
    pub iteration: u64,
    pub sampler: SamplerState,
}

fn counter(v: u64) -> StoredTensor {
    StoredTensor::F64(Tensor::scalar(v as f64))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn to_entries(&self) -> Result<Vec<(String, StoredTensor)>> {
        let mut e: Vec<(String, StoredTensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), StoredTensor::F32(t.clone())))
            .collect();
        for (n, t) in self.optimizer.m.iter() {
            e.push((format!("{OPT_M}{n}"), StoredTensor::F32(t.clone())));
        }
        for (n, t) in self.optimizer.v.iter() {
            e.push((format!("{OPT_V}{n}"), StoredTensor::F32(t.clone())));
        }
        e.push((OPT_STEP.into(), counter(self.optimizer.step)));
        e.push((
            EMA_MEAN.into(),
            StoredTensor::F64(VectorField::stack(&[&self.running_mean.mean])?),
        ));
        e.push((EMA_STEPS.into(), counter(self.running_mean.steps)));
        let rng = [self.sampler.epoch, self.sampler.cursor, self.iteration].map(|v| v as f64);
        e.push((META_RNG.into(), StoredTensor::F64(Tensor::new(vec![3], rng.to_vec())?)));
        Ok(e)
    }

    pub fn from_entries(config: TrainConfig, entries: Vec<(String, StoredTensor)>) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut optimizer = OptimizerState::default();
        let mut mean = None;
        let mut ema_steps = 0;
        let mut meta = None;
        for (name, t) in entries {
            if let Some(rest) = name.strip_prefix(OPT_M) {
                optimizer.m.insert_unchecked(rest.to_string(), t.as_f32(&name)?);
            } else if let Some(rest) = name.strip_prefix(OPT_V) {
                optimizer.v.insert_unchecked(rest.to_string(), t.as_f32(&name)?);
            } else if name == OPT_STEP {
                optimizer.step = t.to_f64().item() as u64;
            } else if name == EMA_MEAN {
                mean = Some(VectorField::unstack(&t.to_f64())?.remove(0));
            } else if name == EMA_STEPS {
                ema_steps = t.to_f64().item() as u64;
            } else if name == META_RNG {
                meta = Some(t.to_f64().into_data());
            } else {
                params.insert(name.clone(), t.as_f32(&name)?)?;
            }
        }
        let mean = mean.ok_or_else(|| Error::Missing(format!("`{EMA_MEAN}` tensor in checkpoint")))?;
        let meta = meta.ok_or_else(|| Error::Missing(format!("`{META_RNG}` tensor in checkpoint")))?;
        if meta.len() != 3 {
            return Err(Error::invalid("`meta/rng` must hold [epoch, cursor, iteration]"));
        }
        Ok(Checkpoint {
            running_mean: RunningMeanField {
                mean,
                beta: config.loss.beta(),
                steps: ema_steps,
            },
            config,
            params,
            optimizer,
            iteration: meta[2] as u64,
            sampler: SamplerState {
                epoch: meta[0] as u64,
                cursor: meta[1] as u64,
            },
        })
    }
}

/// Writes the tensor file and its `<path>.json` config sidecar.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    write_tensor_file(path, &ckpt.to_entries()?)?;
    let side = sidecar(path);
    let json = serde_json::to_string_pretty(&ckpt.config)?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let entries = read_tensor_file(path)?;
    let side = sidecar(path);
    let json = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config: TrainConfig = serde_json::from_str(&json)?;
    Checkpoint::from_entries(config, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, StoredTensor)> {
        vec![
            (
                "a/w".into(),
                StoredTensor::F32(Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap()),
            ),
            (
                "b".into(),
                StoredTensor::F64(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ),
        ]
    }

    #[test]
    fn container_round_trip_and_layout() {
        let bytes = encode_tensors(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"DTC1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(decode_tensors(&bytes).unwrap(), sample());
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes[20] ^= 0x40;
        assert!(matches!(decode_tensors(&bytes), Err(Error::Checksum { .. })));
        let good = encode_tensors(&sample()).unwrap();
        assert!(matches!(
            decode_tensors(&good[..good.len() - 3]),
            Err(Error::Checksum { .. } | Error::Format { .. })
        ));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_tensors(&bad_magic),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_tensors(&sample()).unwrap();
        bytes[4] = 2;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_tensors(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
