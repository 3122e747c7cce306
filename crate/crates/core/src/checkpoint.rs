//! Checkpoint file: every named tensor of a parameter store, the optimizer
//! momentum, and a JSON metadata block.
//!
//! Layout (little-endian): magic `IMGC`, version `u32`, metadata JSON
//! (length-prefixed), parameter count `u32`, then per parameter its name,
//! kind byte, trainable byte, rank, dims and `f32` values; then momentum
//! count and per entry name, rank, dims and values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "IMGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    pub best_top1: f64,
    pub best_epoch: Option<usize>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<NamedTensor>,
    pub momentum: Vec<(String, Tensor<f32>)>,
}

fn kind_byte(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Buffer => 2,
    }
}

fn write_tensor(w: &mut Writer, t: &Tensor<f32>) {
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(r.error(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("size overflows".into()))?;
    Tensor::new(&shape, r.f32s(n)?)
}

impl Checkpoint {
    /// Snapshot of `store`; `momentum` is indexed like the store.
    pub fn capture(meta: CheckpointMeta, store: &ParamStore<f32>, momentum: &[Option<Tensor<f32>>]) -> Self {
        let params = store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                kind: e.kind,
                trainable: e.trainable,
                value: (*e.value).clone(),
            })
            .collect();
        let momentum = store
            .entries()
            .iter()
            .zip(momentum)
            .filter_map(|(e, m)| m.as_ref().map(|m| (e.name.clone(), m.clone())))
            .collect();
        Checkpoint { meta, params, momentum }
    }

    /// Copies every stored tensor into `store` by name and returns the
    /// momentum buffers indexed like the store.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<Vec<Option<Tensor<f32>>>> {
        if self.params.len() != store.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store.find(&p.name).ok_or_else(|| Error::Shape(format!("model has no tensor named {}", p.name)))?;
            store.set(id, p.value.clone())?;
        }
        let mut momentum = vec![None; store.len()];
        for (name, m) in &self.momentum {
            let id = store.find(name).ok_or_else(|| Error::Shape(format!("momentum for unknown tensor {name}")))?;
            if m.shape() != store.value(id).shape() {
                return Err(Error::Shape(format!("momentum for {name} has shape {:?}", m.shape())));
            }
            momentum[id.index()] = Some(m.clone());
        }
        Ok(momentum)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(b"IMGC", CHECKPOINT_VERSION);
        w.str(&serde_json::to_string(&self.meta).expect("metadata serializes"));
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u8(kind_byte(p.kind));
            w.u8(p.trainable as u8);
            write_tensor(&mut w, &p.value);
        }
        w.u32(self.momentum.len() as u32);
        for (name, m) in &self.momentum {
            w.str(name);
            write_tensor(&mut w, m);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let at = r.offset();
        let meta = serde_json::from_str(r.str()?).map_err(|e| r.error_at(at, format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.str()?.to_owned();
            let at = r.offset();
            let kind = match r.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Bias,
                2 => ParamKind::Buffer,
                k => return Err(r.error_at(at, format!("bad parameter kind {k}"))),
            };
            let trainable = r.u8()? != 0;
            params.push(NamedTensor { name, kind, trainable, value: read_tensor(&mut r)? });
        }
        let count = r.u32()? as usize;
        let mut momentum = Vec::new();
        for _ in 0..count {
            let name = r.str()?.to_owned();
            momentum.push((name, read_tensor(&mut r)?));
        }
        r.finish()?;
        Ok(Checkpoint { meta, params, momentum })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5), ParamKind::Weight);
        store.add("b", Tensor::full(&[4], -1.0), ParamKind::Buffer);
        let mut momentum = vec![None; 2];
        momentum[a.index()] = Some(Tensor::full(&[2, 3], 0.25));
        let meta = CheckpointMeta { epoch: 3, best_top1: 0.5, best_epoch: Some(2), config: RunConfig::default() };
        let ck = Checkpoint::capture(meta, &store, &momentum);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);

        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a", Tensor::zeros(&[2, 3]), ParamKind::Weight);
        fresh.add("b", Tensor::zeros(&[4]), ParamKind::Buffer);
        let m = back.restore(&mut fresh).unwrap();
        assert_eq!(fresh.value(a), store.value(a));
        assert_eq!(m[0].as_ref().unwrap().data(), &[0.25; 6]);
        assert!(m[1].is_none());

        let mut bytes = ck.to_bytes();
        bytes[2] = 0;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("IMGC"));
    }
}
