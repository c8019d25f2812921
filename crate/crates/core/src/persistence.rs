//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      6 bytes  "FSGPT\0"
//! version    u32
//! config     u32 length + UTF-8 bytes (resolved run configuration)
//! seed       u64
//! step       u64
//! tensors    u32 count, then per tensor:
//!              u32 name length + name bytes
//!              u8  dtype tag (1 = f32, 2 = f64)
//!              u32 rank, rank × u64 extents
//!              raw little-endian values
//! optimizer  u8 present flag; if 1, a second tensor table holding
//!            "adam.m.<param>" / "adam.v.<param>" as rank-1 tensors
//! crc32      u32, IEEE, over every preceding byte
//! ```
//!
//! Tensors appear in lexicographic name order, so equal stores produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};
use crate::training::{Adam, AdamConfig, Moments, ParameterStore};

pub const MAGIC: &[u8; 6] = b"FSGPT\0";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Optimizer state as stored on disk; the hyperparameters travel in the
/// config blob, not here.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn from_adam(adam: &Adam<T>) -> Self {
        OptimizerState {
            moments: adam.moments().clone(),
        }
    }

    pub fn into_adam(self, config: AdamConfig, step: u64) -> Adam<T> {
        Adam::restore(config, step, self.moments)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: String,
    pub seed: u64,
    pub step: u64,
    pub store: ParameterStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let params: Vec<(&str, &Tensor<T>)> = self.store.iter().map(|(n, p)| (n, &p.tensor)).collect();
        put_table(&mut out, &params);
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let mut entries = Vec::new();
                for (name, m) in &opt.moments {
                    entries.push((format!("{ADAM_M}{name}"), Tensor::new(vec![m.first.len()], m.first.clone())));
                    entries.push((format!("{ADAM_V}{name}"), Tensor::new(vec![m.second.len()], m.second.clone())));
                }
                entries.sort_by(|a, b| a.0.cmp(&b.0));
                let entries: Vec<(String, Tensor<T>)> = entries
                    .into_iter()
                    .map(|(n, t)| (n, t.expect("rank-1 moments are always well formed")))
                    .collect();
                let refs: Vec<(&str, &Tensor<T>)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
                put_table(&mut out, &refs);
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Format(format!("file of {} bytes is too short", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        if stored != computed {
            return Err(Error::Corrupt { stored, computed });
        }
        let config = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let mut store = ParameterStore::new(seed);
        for (name, t) in r.table::<T>()? {
            store.insert(name, t, true)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => Some(decode_moments(r.table::<T>()?)?),
            f => return Err(Error::Format(format!("optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            seed,
            step,
            store,
            optimizer,
        })
    }
}

fn decode_moments<T: Real>(table: Vec<(String, Tensor<T>)>) -> Result<OptimizerState<T>> {
    let mut firsts = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for (name, t) in table {
        if let Some(p) = name.strip_prefix(ADAM_M) {
            firsts.insert(p.to_string(), t.data().to_vec());
        } else if let Some(p) = name.strip_prefix(ADAM_V) {
            seconds.insert(p.to_string(), t.data().to_vec());
        } else {
            return Err(Error::Format(format!("unexpected optimizer entry {name}")));
        }
    }
    if firsts.len() != seconds.len() {
        return Err(Error::Format("unpaired optimizer moments".into()));
    }
    let mut moments = BTreeMap::new();
    for (name, first) in firsts {
        let second = seconds
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing second moment for {name}")))?;
        if second.len() != first.len() {
            return Err(Error::Format(format!("moment length mismatch for {name}")));
        }
        moments.insert(name, Moments { first, second });
    }
    Ok(OptimizerState { moments })
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_table<T: Real>(out: &mut Vec<u8>, entries: &[(&str, &Tensor<T>)]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        put_bytes(out, name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn table<T: Real>(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let tag = self.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} for {name}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Format(format!("{name} is stored as {dtype}, expected {}", T::DTYPE)));
            }
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Format("extent overflows usize".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Format(format!("extent product overflows for {name}")))?;
            let size = dtype.size();
            let raw = self.take(numel.checked_mul(size).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

/// The dtype a checkpoint file was written at, read from its first tensor.
pub fn peek_dtype(path: &Path) -> Result<Option<DType>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, pos: MAGIC.len() };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    r.u32()?;
    r.bytes()?;
    r.u64()?;
    r.u64()?;
    if r.u32()? == 0 {
        return Ok(None);
    }
    r.bytes()?;
    let tag = r.u8()?;
    Ok(DType::from_tag(tag))
}

pub fn save<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
