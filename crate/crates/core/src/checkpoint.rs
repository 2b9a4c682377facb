//! `FMVP` tensor container used for model checkpoints and dataset dumps.
//!
//! ```text
//! "FMVP" | version u32 | tensor_count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 (0 = f32, 1 = f64) | ndim u8 | dims u32 * ndim | payload
//! ```

use std::path::Path;

use crate::autodiff::{Scalar, Tensor};
use crate::encoders::Reader;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMVP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor as stored on disk, in its original precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        if S::DTYPE_CODE == f32::DTYPE_CODE {
            StoredTensor::F32(t.cast())
        } else {
            StoredTensor::F64(t.cast())
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            StoredTensor::F32(_) => f32::DTYPE_CODE,
            StoredTensor::F64(_) => f64::DTYPE_CODE,
        }
    }

    /// Converts to the requested precision.
    pub fn to<S: Scalar>(&self) -> Tensor<S> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, StoredTensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: StoredTensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("tensor name of {} bytes is too long", name.len())));
        }
        if tensor.shape().len() > u8::MAX as usize {
            return Err(Error::invalid(format!("tensor `{name}` has too many dimensions")));
        }
        if self.get(&name).is_some() {
            return Err(Error::TensorMismatch {
                name,
                detail: "duplicate name".into(),
            });
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn push<S: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<S>) -> Result<()> {
        self.insert(name, StoredTensor::from_tensor(tensor))
    }

    /// Stores a single f64 value as a 1×1 tensor.
    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.insert(name, StoredTensor::F64(Tensor::scalar(value)))
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        self.get(name).map(StoredTensor::to).ok_or_else(|| Error::TensorMismatch {
            name: name.to_string(),
            detail: "missing from checkpoint".into(),
        })
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.tensor::<f64>(name)?;
        if t.numel() != 1 {
            return Err(Error::TensorMismatch {
                name: name.to_string(),
                detail: format!("expected a scalar, found shape {:?}", t.shape()),
            });
        }
        Ok(t.item())
    }

    /// Tensors whose names start with `prefix`, converted to `S`.
    pub fn with_prefix<S: Scalar>(&self, prefix: &str) -> Vec<(String, Tensor<S>)> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.to()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected FMVP".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("tensor_count")? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u16("name_len")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.u8("dtype")?;
            let ndim = r.u8("ndim")? as usize;
            let dims_at = r.pos;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = match numel {
                Some(n) if n > 0 => n,
                _ => {
                    return Err(Error::Format {
                        offset: dims_at,
                        msg: format!("tensor `{name}` has invalid dims {dims:?}"),
                    })
                }
            };
            let payload_at = r.pos;
            let bad = |what: &str| Error::Format {
                offset: payload_at,
                msg: format!("tensor `{name}`: {what}"),
            };
            let tensor = match dtype {
                0 => StoredTensor::F32(read_payload(&mut r, dims, numel, &name).map_err(|e| relabel(e, &bad))?),
                1 => StoredTensor::F64(read_payload(&mut r, dims, numel, &name).map_err(|e| relabel(e, &bad))?),
                other => {
                    return Err(Error::Format {
                        offset: dtype_at,
                        msg: format!("tensor `{name}` has unknown dtype {other}"),
                    })
                }
            };
            ck.insert(name, tensor).map_err(|e| Error::Format {
                offset: name_at,
                msg: e.to_string(),
            })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_payload<S: Scalar>(r: &mut Reader<'_>, dims: Vec<usize>, numel: usize, name: &str) -> Result<Tensor<S>> {
    let bytes = numel
        .checked_mul(S::BYTES)
        .ok_or_else(|| Error::invalid("payload size overflows"))?;
    let raw = r.take(bytes, name)?;
    let data: Vec<S> = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "checkpoint" });
    }
    Tensor::new(dims, data)
}

/// Keeps truncation errors (which carry their own offset) and rewrites the rest.
fn relabel(e: Error, bad: &dyn Fn(&str) -> Error) -> Error {
    match e {
        Error::Format { .. } => e,
        other => bad(&other.to_string()),
    }
}
