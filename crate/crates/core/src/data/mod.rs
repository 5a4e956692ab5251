//! Samples, datasets on disk, synthetic data, checkpoints and run
//! configuration.

mod checkpoint;
mod config;
mod png;
mod synth;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, save_checkpoint_as, Checkpoint, CheckpointEntry, Precision, MAGIC, VERSION,
};
pub use config::{DataConfig, EvalConfig, RunConfig};
pub use png::{load_image, load_mask, save_png, MASK_THRESHOLD};
pub use synth::{sample_seed, split_sizes, synth_crack_dataset, synth_sample, SynthParams};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values 0 or 1.
    pub mask: Tensor,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || is[0] != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::shape("sample", is, ms));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Self { id: id.into(), image, mask })
    }

    pub fn label(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&v| v == 1.0).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

pub const SPLIT_FILE: &str = "split.txt";

impl Dataset {
    pub fn all(&self) -> Vec<SegSample> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `images/<id>.png`, `masks/<id>.png` and `split.txt` with one
    /// `<id> <train|val|test>` line per sample.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut split = String::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for s in part {
                save_png(dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
                save_png(dir.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
                split.push_str(&format!("{} {name}\n", s.id));
            }
        }
        let p = dir.join(SPLIT_FILE);
        fs::write(&p, split).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sp = dir.join(SPLIT_FILE);
        let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let mut ds = Dataset::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(part), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(&sp, format!("line {}: expected `<id> <split>`", no + 1)));
            };
            let target = match part {
                "train" => &mut ds.train,
                "val" => &mut ds.val,
                "test" => &mut ds.test,
                other => return Err(Error::format(&sp, format!("line {}: unknown split `{other}`", no + 1))),
            };
            let image = load_image(dir.join("images").join(format!("{id}.png")))?;
            let mask = load_mask(dir.join("masks").join(format!("{id}.png")))?;
            target.push(SegSample::new(id, image, mask)?);
        }
        Ok(ds)
    }
}
