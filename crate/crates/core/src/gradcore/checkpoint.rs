//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"DISENCK1"
//! u32 config_len, config_len bytes of UTF-8 JSON
//! u32 tensor_count
//! repeated: u32 name_len, name bytes, u32 rank, rank x u32 dims, f32 payload
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::adam::{AdamHyper, AdamState};
use super::network::{Architecture, ModelParams, NamedTensor};
use super::tensor::Tensor;
use super::GradError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DISENCK1";

/// Decoded checkpoint: a JSON config echo plus named float32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), GradError> {
        let config = serde_json::to_vec_pretty(&self.config)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(&config)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, GradError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, GradError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GradError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(GradError::Checkpoint("bad magic bytes".into()));
        }
        let config_len = cur.u32()? as usize;
        let config = serde_json::from_slice(cur.take(config_len)?)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| GradError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let payload = cur.take(
                len.checked_mul(4)
                    .ok_or_else(|| GradError::Checkpoint("tensor too large".into()))?,
            )?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        if cur.pos != bytes.len() {
            return Err(GradError::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, GradError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| GradError::Checkpoint(format!("missing tensor `{name}`")))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GradError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| GradError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GradError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Serialize, Deserialize)]
struct AdamEcho {
    step: u64,
    hyper: AdamHyper,
}

/// Echo of the model and optimizer configuration stored in the JSON block.
#[derive(Serialize, Deserialize)]
struct ModelEcho {
    arch: Architecture,
    adam: Option<AdamEcho>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Pack parameters (and optionally optimizer state) with an arbitrary JSON `extra` block.
///
/// Additional tensor groups (e.g. a second parameter set) may be appended by
/// the caller under their own name prefix.
pub fn pack(
    params: &ModelParams<f32>,
    adam: Option<&AdamState<f32>>,
    extra: serde_json::Value,
) -> Result<Checkpoint, GradError> {
    let echo = ModelEcho {
        arch: params.arch.clone(),
        adam: adam.map(|a| AdamEcho {
            step: a.step,
            hyper: a.hyper,
        }),
        extra,
    };
    let mut tensors: Vec<(String, Tensor<f32>)> = params
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.value.clone()))
        .collect();
    if let Some(a) = adam {
        for (t, m) in params.tensors.iter().zip(&a.m) {
            tensors.push((format!("adam.m.{}", t.name), m.clone()));
        }
        for (t, v) in params.tensors.iter().zip(&a.v) {
            tensors.push((format!("adam.v.{}", t.name), v.clone()));
        }
    }
    Ok(Checkpoint {
        config: serde_json::to_value(echo)?,
        tensors,
    })
}

/// Parameters stored under `prefix` (empty for the primary set).
pub fn unpack_params(ck: &Checkpoint, prefix: &str) -> Result<ModelParams<f32>, GradError> {
    let echo: ModelEcho = serde_json::from_value(ck.config.clone())?;
    let arch = echo.arch;
    arch.validate()?;
    let tensors = arch
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = ck.tensor(&format!("{prefix}{name}"))?;
            if t.shape() != shape.as_slice() {
                return Err(GradError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(NamedTensor { name, value: t.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelParams { arch, tensors })
}

pub fn unpack_adam(ck: &Checkpoint, params: &ModelParams<f32>) -> Result<Option<AdamState<f32>>, GradError> {
    let echo: ModelEcho = serde_json::from_value(ck.config.clone())?;
    let Some(a) = echo.adam else { return Ok(None) };
    let mut m = Vec::with_capacity(params.tensors.len());
    let mut v = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        m.push(ck.tensor(&format!("adam.m.{}", t.name))?.clone());
        v.push(ck.tensor(&format!("adam.v.{}", t.name))?.clone());
    }
    Ok(Some(AdamState {
        step: a.step,
        m,
        v,
        hyper: a.hyper,
    }))
}

pub fn extra(ck: &Checkpoint) -> Result<serde_json::Value, GradError> {
    let echo: ModelEcho = serde_json::from_value(ck.config.clone())?;
    Ok(echo.extra)
}
