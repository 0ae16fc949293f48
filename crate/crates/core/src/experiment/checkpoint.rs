//! Binary checkpoint format.
//!
//! ```text
//! "PRLB"  u8 version
//! u32 len, model spec (TOML text)
//! per parameter, in model order:
//!     u32 len, id   u8 rank   rank × u32 dims   n × f32 θ   n × u8 mask
//! u64 init seed
//! u8 has_optimizer, then if 1:
//!     u8 kind (0 sgd, 1 adam)   3 × f64 hyperparameters   f64 lr   u64 step
//!     u32 entries, each: u32 len, id   u8 slots, each: u32 n, n × f32
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelSpec};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRLB";
pub const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(model: &Model, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_str(&mut out, &model.spec().to_text());
    for p in model.params() {
        put_str(&mut out, p.id());
        let shape = p.value().shape();
        out.push(shape.len() as u8);
        for &d in shape {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, p.value().data());
        out.extend(p.mask().data().iter().map(|&m| u8::from(m != 0.0)));
    }
    out.extend_from_slice(&model.seed().to_le_bytes());
    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            let (kind, hyper) = match state.kind {
                OptimizerKind::Sgd { momentum } => (0u8, [momentum, 0.0, 0.0]),
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => (1u8, [beta1, beta2, epsilon]),
            };
            out.push(kind);
            for h in hyper {
                out.extend_from_slice(&h.to_le_bytes());
            }
            out.extend_from_slice(&state.lr.to_le_bytes());
            out.extend_from_slice(&state.step.to_le_bytes());
            put_u32(&mut out, state.buffers().len());
            for (id, slots) in state.buffers() {
                put_str(&mut out, id);
                out.push(slots.len() as u8);
                for t in slots {
                    put_u32(&mut out, t.len());
                    put_f32s(&mut out, t.data());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptPayload(format!(
                    "need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptPayload("non-UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptPayload("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Option<OptimizerState>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptPayload("missing PRLB magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let spec = ModelSpec::from_text(&r.string()?)
        .map_err(|e| Error::CorruptPayload(format!("model spec: {e}")))?;
    let mut records = Vec::new();
    let count = build_model(spec.clone(), 0)?.params().len();
    for _ in 0..count {
        let id = r.string()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let value = r.f32s(n)?;
        let mask = r.take(n)?;
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::CorruptPayload(format!("non-binary mask in `{id}`")));
        }
        let mask: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
        records.push((id, shape, value, mask));
    }
    let seed = r.u64()?;
    let mut model = build_model(spec, seed)?;
    for (id, shape, value, mask) in records {
        let p = model
            .param_mut(&id)
            .ok_or_else(|| Error::CorruptPayload(format!("unknown parameter `{id}`")))?;
        if p.value().shape() != shape.as_slice() {
            return Err(Error::CorruptPayload(format!("shape of `{id}` is {shape:?}")));
        }
        *p.value_mut() = Tensor::new(shape.clone(), value)?;
        p.set_mask(Tensor::new(shape, mask)?)?;
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let kind = r.u8()?;
            let h = [r.f64()?, r.f64()?, r.f64()?];
            let kind = match kind {
                0 => OptimizerKind::Sgd { momentum: h[0] },
                1 => OptimizerKind::Adam {
                    beta1: h[0],
                    beta2: h[1],
                    epsilon: h[2],
                },
                k => return Err(Error::CorruptPayload(format!("optimizer kind {k}"))),
            };
            let lr = r.f64()?;
            let step = r.u64()?;
            let mut buffers = BTreeMap::new();
            for _ in 0..r.u32()? {
                let id = r.string()?;
                let shape = model
                    .param(&id)
                    .ok_or_else(|| Error::CorruptPayload(format!("buffer for unknown `{id}`")))?
                    .value()
                    .shape()
                    .to_vec();
                let slots = r.u8()?;
                let mut tensors = Vec::with_capacity(slots as usize);
                for _ in 0..slots {
                    let n = r.u32()?;
                    tensors.push(
                        Tensor::new(shape.clone(), r.f32s(n)?)
                            .map_err(|_| Error::CorruptPayload(format!("buffer size for `{id}`")))?,
                    );
                }
                buffers.insert(id, tensors);
            }
            let mut state = OptimizerState::new(kind, lr, &model);
            state.step = step;
            state.set_buffers(buffers);
            Some(state)
        }
        f => return Err(Error::CorruptPayload(format!("optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::CorruptPayload(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((model, optimizer))
}

pub fn save_checkpoint(model: &Model, optimizer: Option<&OptimizerState>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptimizerState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
