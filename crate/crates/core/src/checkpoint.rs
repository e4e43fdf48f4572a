//! Binary parameter dumps.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        5 bytes  "STPC1"
//! version      u32      1
//! epochs_done  u32
//! adam_step    u64
//! meta_len     u32, then meta_len bytes of UTF-8 (`key = value` network config)
//! count        u32
//! count × tensor:
//!     name_len u32, then name_len bytes of UTF-8
//!     ndim     u32, then ndim × u64 extents
//!     data     product(extents) × f64
//! ```
//!
//! Model parameters are stored under their own names; the Adam moments of
//! parameter `p` are stored as `adam.m.p` and `adam.v.p`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segnet::{NetworkConfig, SegModel, TrainState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"STPC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub epochs_done: u32,
    pub adam_step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epochs_done.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(bad("missing STPC1 header"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let epochs_done = r.u32()?;
        let adam_step = r.u64()?;
        let meta = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            meta,
            epochs_done,
            adam_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Snapshot of parameters, optimizer moments and epoch count.
    pub fn from_state(state: &TrainState) -> Self {
        let params = state.model.params().params();
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect();
        for (i, p) in params.iter().enumerate() {
            let (m, v) = state.adam.moments(i);
            let shape = p.tensor.shape().to_vec();
            tensors.push((format!("adam.m.{}", p.name), Tensor::from_parts_unchecked(shape.clone(), m.to_vec())));
            tensors.push((format!("adam.v.{}", p.name), Tensor::from_parts_unchecked(shape, v.to_vec())));
        }
        Checkpoint {
            meta: state.model.config().to_text(),
            epochs_done: state.epochs_done as u32,
            adam_step: state.adam.step_count(),
            tensors,
        }
    }

    pub fn config(&self) -> Result<NetworkConfig> {
        NetworkConfig::from_text(&self.meta)
    }

    /// Rebuilds the model described by `meta` and loads every tensor.
    pub fn to_state(&self) -> Result<TrainState> {
        let model = SegModel::new(self.config()?)?;
        let mut state = TrainState::new(model);
        let fetch = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = self.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t.clone())
        };
        let mut first = Vec::new();
        let mut second = Vec::new();
        for p in state.model.params_mut().params_mut() {
            let loaded = fetch(&p.name, &p.tensor)?;
            first.push(fetch(&format!("adam.m.{}", p.name), &p.tensor)?.into_data());
            second.push(fetch(&format!("adam.v.{}", p.name), &p.tensor)?.into_data());
            p.tensor = loaded;
        }
        let expected = 3 * state.model.params().len();
        if self.tensors.len() != expected {
            return Err(bad(format!("{} tensors stored, model has {expected}", self.tensors.len())));
        }
        state.adam.restore(self.adam_step, first, second)?;
        state.epochs_done = self.epochs_done as usize;
        Ok(state)
    }
}
