//! Versioned binary checkpoint: config JSON, named tensors and optional optimizer state.
//!
//! Layout (little-endian):
//! ```text
//! magic "VLORACKP" | u32 version
//! u64 len | config JSON | 32-byte SHA-256 of the JSON
//! u32 count | per tensor: name, u8 group, u8 trainable, tensor
//! u8 has_state | [u64 epoch, u64 step, f64 best_abs_rel, u32 count, per entry: name, m, v]
//! 32-byte SHA-256 of everything above
//! ```
//! where a name is `u32 len | UTF-8` and a tensor is `u32 ndim | u64 dims.. | f64 data..`.

use std::fs;
use std::path::Path;

use crate::autograd::{ParamGroup, ParamStore, Tensor};
use crate::config::{sha256, ExperimentConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VLORACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub tensor: Tensor,
}

/// Adam moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epoch containing the next step.
    pub epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_abs_rel: f64,
    pub moments: Vec<MomentPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub tensors: Vec<NamedTensor>,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_store(config: &ExperimentConfig, store: &ParamStore, state: Option<TrainState>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                group: p.group,
                trainable: p.trainable,
                tensor: p.value().clone(),
            })
            .collect();
        Self { config: config.clone(), tensors, state }
    }

    /// Copy every tensor into `store`, which must have exactly the same layout.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            let id =
                store.id(&t.name).ok_or_else(|| Error::Checkpoint(format!("model has no parameter {:?}", t.name)))?;
            let p = store.get(id);
            if p.group != t.group || p.trainable != t.trainable {
                return Err(Error::Checkpoint(format!("parameter {:?} changed group or trainability", t.name)));
            }
            store.set_value(id, t.tensor.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("config serializes");
        w.extend_from_slice(&(json.len() as u64).to_le_bytes());
        w.extend_from_slice(json.as_bytes());
        w.extend_from_slice(&sha256(json.as_bytes()));
        w.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_name(&mut w, &t.name);
            w.push(t.group.tag());
            w.push(t.trainable as u8);
            put_tensor(&mut w, &t.tensor);
        }
        match &self.state {
            None => w.push(0),
            Some(s) => {
                w.push(1);
                w.extend_from_slice(&s.epoch.to_le_bytes());
                w.extend_from_slice(&s.step.to_le_bytes());
                w.extend_from_slice(&s.best_abs_rel.to_le_bytes());
                w.extend_from_slice(&(s.moments.len() as u32).to_le_bytes());
                for m in &s.moments {
                    put_name(&mut w, &m.name);
                    put_tensor(&mut w, &m.m);
                    put_tensor(&mut w, &m.v);
                }
            }
        }
        let digest = sha256(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(body) != digest {
            return Err(Error::Checkpoint("checksum mismatch; file is corrupt or truncated".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64()? as usize;
        let json = r.take(len)?;
        if sha256(json) != r.take(32)? {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let json = std::str::from_utf8(json).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config =
            ExperimentConfig::from_json(json).map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.name()?;
            let tag = r.u8()?;
            let group =
                ParamGroup::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown group tag {tag}")))?;
            let trainable = r.u8()? != 0;
            tensors.push(NamedTensor { name, group, trainable, tensor: r.tensor()? });
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let epoch = r.u64()?;
                let step = r.u64()?;
                let best_abs_rel = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let n = r.u32()? as usize;
                let mut moments = Vec::with_capacity(n);
                for _ in 0..n {
                    moments.push(MomentPair { name: r.name()?, m: r.tensor()?, v: r.tensor()? });
                }
                Some(TrainState { epoch, step, best_abs_rel, moments })
            }
            b => return Err(Error::Checkpoint(format!("bad state flag {b}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
        }
        Ok(Self { config, tensors, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_name(w: &mut Vec<u8>, name: &str) {
    w.extend_from_slice(&(name.len() as u32).to_le_bytes());
    w.extend_from_slice(name.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    w.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let t = |v: f64| Tensor::new(&[2, 2], vec![v, -v, 0.5, f64::MIN_POSITIVE]).unwrap();
        Checkpoint {
            config: ExperimentConfig::default(),
            tensors: vec![
                NamedTensor { name: "a".into(), group: ParamGroup::EncoderBase, trainable: false, tensor: t(1.0) },
                NamedTensor { name: "b".into(), group: ParamGroup::LoraB, trainable: true, tensor: t(0.1) },
            ],
            state: Some(TrainState {
                epoch: 3,
                step: 17,
                best_abs_rel: 0.25,
                moments: vec![MomentPair { name: "b".into(), m: t(1e-3), v: t(1e-6) }],
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(b"not a checkpoint at all, just some text"),
            Err(Error::Checkpoint(_))
        ));
    }
}
