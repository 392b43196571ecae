//! Binary checkpoint format.
//!
//! ```text
//! magic "STRYCKPT" | version u32 | meta_len u32 | meta JSON
//! count u32 | count x (name_len u32 | name | rank u32 | dims u64 x rank | data)
//! ```
//! All integers and floats are little-endian; floats are 32-bit for `f32`
//! checkpoints and 64-bit for `f64` ones.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::StoryTransform;
use crate::scalar::{Dtype, Scalar};

use super::{Model, ModelConfig, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STRYCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: Dtype,
    pub step: u64,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub vocab_hash: String,
    #[serde(default)]
    pub manifest_hash: String,
    #[serde(default)]
    pub transform: StoryTransform,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub meta: CheckpointMeta,
    pub model: Model<T>,
    /// Adam first and second moments, when saved from a trainer.
    pub moments: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: Model<T>) -> Self {
        let meta = CheckpointMeta {
            dtype: T::DTYPE,
            step: 0,
            model: model.config().clone(),
            train: None,
            vocab_hash: String::new(),
            manifest_hash: String::new(),
            transform: StoryTransform::default(),
        };
        Self { meta, model, moments: None }
    }

    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        let mut ck = Self::from_model(trainer.model.clone());
        ck.meta.step = trainer.step;
        ck.meta.train = Some(trainer.cfg);
        ck.moments = Some((trainer.m.clone(), trainer.v.clone()));
        ck
    }

    /// Rebuilds a trainer from a checkpoint that carries optimizer state.
    pub fn into_trainer(self, cfg: TrainConfig) -> Result<Trainer<T>> {
        let (m, v) = self.moments.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer moments".into()))?;
        Trainer::resume(self.model, cfg, m, v, self.meta.step)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut out = Vec::with_capacity(self.model.params.len() * T::DTYPE.width() * 3 + 4096);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut meta = self.meta.clone();
        meta.dtype = T::DTYPE;
        meta.model = self.model.config().clone();
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let tensors = self.model.layout().tensors();
        let groups: Vec<(&str, &[T])> = match &self.moments {
            Some((m, v)) => vec![("", &self.model.params[..]), ("adam.m.", &m[..]), ("adam.v.", &v[..])],
            None => vec![("", &self.model.params[..])],
        };
        out.extend_from_slice(&((tensors.len() * groups.len()) as u32).to_le_bytes());
        for (prefix, data) in groups {
            for t in tensors {
                let name = format!("{prefix}{}", t.name);
                out.extend_from_slice(&(name.len() as u32).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &x in &data[t.offset..t.offset + t.len()] {
                    x.write_le(&mut out);
                }
            }
        }
        w.write_all(&out)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        let meta = cur.header()?;
        if meta.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint holds {:?} weights, expected {:?}", meta.dtype, T::DTYPE)));
        }
        meta.model.validate()?;

        let count = cur.u32()? as usize;
        let mut found: HashMap<String, (Vec<usize>, Vec<T>)> = HashMap::new();
        let width = T::DTYPE.width();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(cur.u64()?).map_err(|_| Error::Checkpoint("dimension overflows".into()))?);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = len
                .and_then(|l| l.checked_mul(width))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let data = cur.take(bytes)?.chunks_exact(width).map(T::read_le).collect();
            if found.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if cur.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last tensor", buf.len() - cur.pos)));
        }

        let layout = super::Layout::new(&meta.model);
        let has_moments = found.keys().any(|k| k.starts_with("adam."));
        let prefixes: &[&str] = if has_moments { &["", "adam.m.", "adam.v."] } else { &[""] };
        let mut problems = Vec::new();
        let mut flats: Vec<Vec<T>> = Vec::new();
        for prefix in prefixes {
            let mut flat = vec![T::zero(); layout.total()];
            for t in layout.tensors() {
                let name = format!("{prefix}{}", t.name);
                match found.remove(&name) {
                    None => problems.push(format!("`{name}` missing (expected {:?})", t.shape)),
                    Some((shape, _)) if shape != t.shape => {
                        problems.push(format!("`{name}` has shape {shape:?}, expected {:?}", t.shape))
                    }
                    Some((_, data)) => flat[t.offset..t.offset + t.len()].copy_from_slice(&data),
                }
            }
            flats.push(flat);
        }
        let mut extra: Vec<_> = found.into_keys().collect();
        extra.sort();
        problems.extend(extra.into_iter().map(|n| format!("`{n}` unexpected")));
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("tensor mismatch: {}", problems.join("; "))));
        }
        let mut flats = flats.into_iter();
        let model = Model::from_params(meta.model.clone(), flats.next().expect("params"))?;
        let moments = if has_moments { Some((flats.next().expect("m"), flats.next().expect("v"))) } else { None };
        Ok(Self { meta, model, moments })
    }
}

/// Reads only the header of a checkpoint, e.g. to pick the element type.
pub fn read_checkpoint_meta(mut r: impl Read) -> Result<CheckpointMeta> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| Error::Checkpoint("file too short for a checkpoint header".into()))?;
    let len = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes")) as usize;
    let mut buf = head.to_vec();
    buf.resize(16 + len, 0);
    r.read_exact(&mut buf[16..]).map_err(|_| Error::Checkpoint("checkpoint truncated in its config block".into()))?;
    Cursor { buf: &buf, pos: 0 }.header()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self) -> Result<CheckpointMeta> {
        if self.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = self.u32()? as usize;
        let json = self.take(len)?;
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))
    }
}
