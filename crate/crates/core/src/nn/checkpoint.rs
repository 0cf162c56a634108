//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   b"APECKPT1"
//! u64 len, config  (UTF-8 JSON)
//! u64 len, meta    (UTF-8 JSON: optimizer counters, or "null")
//! u64 count
//! count × { u32 len, name; u32 ndim; ndim × u64 dim; product(dim) × f64 }
//! ```
//!
//! Optimizer moments are stored as extra arrays named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, OptimizerState};
use super::params::ParamStore;
use crate::error::{ApeError, Result};

const MAGIC: &[u8; 8] = b"APECKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    cfg: AdamConfig,
    step: u64,
    param_steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// The run configuration, serialized by the caller.
    pub config: String,
    meta: Option<OptimizerMeta>,
    pub arrays: Vec<NamedArray>,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend((bytes.len() as u64).to_le_bytes());
    out.extend(bytes);
}

impl Checkpoint {
    pub fn capture(config: String, params: &ParamStore, optimizer: Option<&OptimizerState>) -> Self {
        let mut arrays: Vec<NamedArray> = params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
            .collect();
        let meta = optimizer.map(|opt| {
            for (p, (m, v)) in params.iter().zip(opt.first.iter().zip(&opt.second)) {
                arrays.push(NamedArray {
                    name: format!("adam.m/{}", p.name),
                    shape: p.shape.clone(),
                    data: m.clone(),
                });
                arrays.push(NamedArray {
                    name: format!("adam.v/{}", p.name),
                    shape: p.shape.clone(),
                    data: v.clone(),
                });
            }
            OptimizerMeta {
                cfg: opt.cfg.clone(),
                step: opt.step,
                param_steps: opt.param_steps.clone(),
            }
        });
        Checkpoint { config, meta, arrays }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        put_bytes(&mut out, self.config.as_bytes());
        let meta = serde_json::to_string(&self.meta).expect("meta serializes");
        put_bytes(&mut out, meta.as_bytes());
        out.extend((self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend((a.name.len() as u32).to_le_bytes());
            out.extend(a.name.as_bytes());
            out.extend((a.shape.len() as u32).to_le_bytes());
            for &dim in &a.shape {
                out.extend((dim as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ApeError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let config = r.string_u64()?;
        let meta_text = r.string_u64()?;
        let meta: Option<OptimizerMeta> = serde_json::from_str(&meta_text)
            .map_err(|e| ApeError::Checkpoint(format!("optimizer metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ApeError::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(ApeError::Checkpoint("trailing bytes after the last array".into()));
        }
        Ok(Checkpoint { config, meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| ApeError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ApeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn lookup(&self) -> HashMap<&str, &NamedArray> {
        self.arrays.iter().map(|a| (a.name.as_str(), a)).collect()
    }

    /// Copies every registered parameter out of the checkpoint. Fails if a
    /// parameter is missing or differently shaped, or if the checkpoint holds
    /// model arrays the registry does not know.
    pub fn restore_params(&self, params: &mut ParamStore) -> Result<()> {
        let arrays = self.lookup();
        for p in params.iter() {
            match arrays.get(p.name.as_str()) {
                None => return Err(ApeError::Checkpoint(format!("missing parameter `{}`", p.name))),
                Some(a) if a.shape != p.shape => {
                    return Err(ApeError::Checkpoint(format!(
                        "parameter `{}` has shape {:?} in the checkpoint but {:?} in the model",
                        p.name, a.shape, p.shape
                    )))
                }
                Some(_) => {}
            }
        }
        let model_arrays = self.arrays.iter().filter(|a| !a.name.starts_with("adam."));
        for a in model_arrays {
            if params.find(&a.name).is_none() {
                return Err(ApeError::Checkpoint(format!("unexpected parameter `{}`", a.name)));
            }
        }
        for p in params.iter_mut() {
            p.value.copy_from_slice(&arrays[p.name.as_str()].data);
        }
        Ok(())
    }

    /// Rebuilds the optimizer state, if one was saved.
    pub fn restore_optimizer(&self, params: &ParamStore) -> Result<Option<OptimizerState>> {
        let Some(meta) = &self.meta else {
            return Ok(None);
        };
        if meta.param_steps.len() != params.len() {
            return Err(ApeError::Checkpoint("optimizer state covers a different parameter set".into()));
        }
        let arrays = self.lookup();
        let fetch = |prefix: &str, name: &str, len: usize| -> Result<Vec<f64>> {
            let key = format!("{prefix}/{name}");
            match arrays.get(key.as_str()) {
                Some(a) if a.data.len() == len => Ok(a.data.clone()),
                _ => Err(ApeError::Checkpoint(format!("missing or misshapen `{key}`"))),
            }
        };
        let mut state = OptimizerState::new(meta.cfg.clone(), params);
        state.step = meta.step;
        state.param_steps = meta.param_steps.clone();
        for (i, p) in params.iter().enumerate() {
            state.first[i] = fetch("adam.m", &p.name, p.value.len())?;
            state.second[i] = fetch("adam.v", &p.name, p.value.len())?;
        }
        Ok(Some(state))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ApeError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string_u64(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| ApeError::Checkpoint("header is not UTF-8".into()))
    }
}
