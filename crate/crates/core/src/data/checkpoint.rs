//! Binary checkpoint: an 8-byte magic, a `u32` version, a precision byte,
//! the model config as TOML, the seed, the named tensors as little-endian
//! `f64` or `f32`, and a trailing FNV-1a checksum of everything before it.
//! All integers are little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Module, ParamKind};

pub const MAGIC: &[u8; 8] = b"STSGCKPT";
pub const VERSION: u32 = 1;

/// Storage width of tensor values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Bit-exact.
    #[default]
    F64,
    /// Half the size; batch-statistics inference can amplify the rounding.
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F64 => 0,
            Precision::F32 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub precision: Precision,
    pub entries: Vec<CheckpointEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, precision: Precision) -> Self {
        let mut entries = Vec::new();
        model.visit("", &mut |name, t, kind| {
            entries.push(CheckpointEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                data: match precision {
                    Precision::F64 => t.data().to_vec(),
                    Precision::F32 => t.data().iter().map(|&v| v as f32 as f64).collect(),
                },
            })
        });
        Self {
            config: model.config.clone(),
            seed,
            precision,
            entries,
        }
    }

    /// Trainable scalars stored.
    pub fn num_params(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.precision.tag());
        let cfg = toml::to_string(&self.config).expect("config serializes");
        b.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        b.extend_from_slice(cfg.as_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(match e.kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            });
            b.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                match self.precision {
                    Precision::F64 => b.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => b.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let sum = fnv1a(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)".into()));
        }
        let mut r = Reader { bytes, pos: MAGIC.len(), path };
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        if bytes.len() < MAGIC.len() + 13 {
            return Err(bad("truncated checkpoint".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(bad("checksum mismatch (truncated or corrupted file)".into()));
        }
        r.bytes = body;
        let precision = match r.take(1)?[0] {
            0 => Precision::F64,
            1 => Precision::F32,
            t => return Err(bad(format!("unknown precision tag {t}"))),
        };
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| bad("config is not UTF-8".into()))?;
        let config: ModelConfig = toml::from_str(cfg_text).map_err(|e| bad(format!("stored config: {e}")))?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad("entry name is not UTF-8".into()))?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(bad(format!("entry {name}: unknown kind {k}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("entry {name}: shape overflow")))?;
            let width = precision.width();
            let raw = r.take(count.checked_mul(width).ok_or_else(|| bad("entry too large".into()))?)?;
            let data = match precision {
                Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            entries.push(CheckpointEntry { name, kind, shape, data });
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self {
            config,
            seed,
            precision,
            entries,
        })
    }

    /// Copy the stored tensors into `model`, which must have exactly the same
    /// names and shapes.
    pub fn apply(&self, model: &mut Model, path: &Path) -> Result<()> {
        let mut by_name: HashMap<&str, &CheckpointEntry> = self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut err = None;
        model.visit_mut("", &mut |name, t, kind| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => err = Some(Error::format(path, format!("missing tensor {name}"))),
                Some(e) if e.shape != t.shape() || e.kind != kind => {
                    err = Some(Error::format(
                        path,
                        format!("tensor {name}: stored {:?} does not match model {:?}", e.shape, t.shape()),
                    ))
                }
                Some(e) => {
                    if let Err(x) = t.set_data(e.data.clone()) {
                        err = Some(x);
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format(path, format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, "truncated checkpoint")),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(model: &Model, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_as(model, seed, Precision::F64, path)
}

pub fn save_checkpoint_as(model: &Model, seed: u64, precision: Precision, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::from_model(model, seed, precision).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Rebuild the stored model.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, u64)> {
    let path = path.as_ref();
    let ck = read_checkpoint(path)?;
    let mut model = Model::new(&ck.config, ck.seed)?;
    ck.apply(&mut model, path)?;
    Ok((model, ck.seed))
}
