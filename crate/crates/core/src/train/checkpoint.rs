//! Binary checkpoint format.
//!
//! ```text
//! "MIKT" | u32 version | u64 header_len | header JSON
//! u32 tensor_count | per tensor: u32 name_len, name, u8 dtype, u32 ndim,
//!                                u64 dims.., little-endian values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Scaler;
use crate::model::{MikModel, ModelConfig};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"MIKT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint or unsupported format version: {0}")]
    Version(String),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("checkpoint contains unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint config does not match: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub phase: String,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub scaler: Option<Scaler>,
    pub metadata: TrainMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn encode<T: Scalar>(header: &CheckpointHeader, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.tag());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    buf
}

/// Writes parameters and buffers atomically (temp file, then rename).
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &MikModel<T>,
    scaler: Option<&Scaler>,
    metadata: TrainMeta,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        config: model.config().clone(),
        scaler: scaler.cloned(),
        metadata,
    };
    let buffers = model.buffers();
    let tensors: Vec<(String, &Tensor<T>)> = model
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), &p.value))
        .chain(buffers.iter().map(|(n, t)| (n.clone(), t)))
        .collect();
    let bytes = encode(&header, &tensors);
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| CheckpointError::Truncated(what.to_string()))
    }
}

fn read_values<T: Scalar, S: Scalar>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::DTYPE.size())
        .map(|b| T::from_f64_lossy(S::read_le(b).to_f64_lossy()))
        .collect()
}

/// Parses a checkpoint from bytes; values stored in another precision are
/// converted to `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::Version("file too short".into()))?;
    if magic != MAGIC {
        return Err(CheckpointError::Version(format!("bad magic bytes {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(format!(
            "found version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hlen = r.len("header length")?;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let nlen = r.u32("tensor name")? as usize;
        let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Header(format!("tensor {i} name is not UTF-8")))?;
        let tag = r.take(1, &name)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| CheckpointError::Header(format!("tensor {name:?} has unknown dtype {tag}")))?;
        let ndim = r.u32(&name)? as usize;
        let shape = (0..ndim).map(|_| r.len(&name)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes_needed = n
            .checked_mul(dtype.size())
            .ok_or_else(|| CheckpointError::Truncated(name.clone()))?;
        let raw = r.take(bytes_needed, &name)?;
        let data = match dtype {
            DType::F32 => read_values::<T, f32>(raw),
            DType::F64 => read_values::<T, f64>(raw),
        };
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Header("trailing bytes after tensor table".into()));
    }
    Ok(Checkpoint { header, tensors })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

impl<T: Scalar> Checkpoint<T> {
    /// Copies every stored tensor into `model`, which must have been built
    /// from the same config.
    pub fn load_into(&self, model: &mut MikModel<T>) -> Result<(), CheckpointError> {
        let diff = self.header.config.diff(model.config());
        if !diff.is_empty() {
            return Err(CheckpointError::ConfigMismatch(diff));
        }
        let buffers = model.buffers();
        let mut seen = vec![false; model.params().len()];
        for (name, t) in &self.tensors {
            if let Some((_, b)) = buffers.iter().find(|(n, _)| n == name) {
                if b.shape() != t.shape() {
                    return Err(CheckpointError::TensorShape {
                        name: name.clone(),
                        expected: b.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                continue;
            }
            let id = model
                .params()
                .id(name)
                .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
            let expected = model.params().value(id).shape().to_vec();
            if expected != t.shape() {
                return Err(CheckpointError::TensorShape {
                    name: name.clone(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            *model.params_mut().value_mut(id) = t.clone();
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = model.params().iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
            return Err(CheckpointError::MissingTensor(name));
        }
        Ok(())
    }

    /// Builds a fresh model from the stored config and loads the weights.
    pub fn into_model(self) -> crate::Result<MikModel<T>> {
        let mut model = MikModel::build(&self.header.config, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }
}
