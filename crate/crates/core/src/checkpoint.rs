//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVAE"  u32 version
//! u32 len, config text (UTF-8)
//! u64 iteration
//! [u8; 32] rng seed, u64 rng stream, u128 rng word position
//! u64 × 4 Adam step counters (encoder, decoder, generator, critic)
//! u32 tensor count, then per tensor:
//!     u32 len, name;  u32 rank;  u64 × rank dims;  f64 × n values (row-major)
//! ```
//!
//! Tensors appear in a fixed order: every model parameter, then the Adam
//! first and second moments of each group.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::model::Role;
use crate::tensor::Tensor;
use crate::train::{Models, Trainer};

pub const MAGIC: &[u8; 4] = b"AVAE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: bad shape {shape:?}")))?;
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn named_tensors(trainer: &Trainer) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for role in Role::ALL {
        let m = trainer.models.get(role);
        out.extend(m.param_names().into_iter().zip(m.params()));
    }
    for role in Role::ALL {
        let s = trainer.states.get(role);
        for (kind, moments) in [("m", &s.first), ("v", &s.second)] {
            for (i, t) in moments.iter().enumerate() {
                out.push((format!("adam.{}.{kind}.{i}", role.name()), t));
            }
        }
    }
    out
}

pub fn to_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(trainer.config.to_text().as_bytes());
    w.u64(trainer.iteration);
    w.0.extend_from_slice(&trainer.rng.get_seed());
    w.u64(trainer.rng.get_stream());
    w.0.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    for role in Role::ALL {
        w.u64(trainer.states.get(role).step);
    }
    let tensors = named_tensors(trainer);
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.tensor(&name, t);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Trainer, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 || r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
    let config = TrainConfig::parse(text)?;
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut steps = [0u64; 4];
    for s in &mut steps {
        *s = r.u64()?;
    }
    let count = r.u32()? as usize;
    let mut stored: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if stored.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("tensor `{name}` stored twice")));
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }

    // Rebuild the architecture from the config, then fill in every tensor.
    let mut trainer = Trainer::new(config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut fill = |name: String, slot: &mut Tensor| -> Result<(), CheckpointError> {
        let t = stored
            .remove(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        Ok(())
    };
    for role in Role::ALL {
        let m = trainer.models.get_mut(role);
        let names = m.param_names();
        for (name, p) in names.into_iter().zip(m.params_mut()) {
            fill(name, p)?;
        }
    }
    for (role, step) in Role::ALL.into_iter().zip(steps) {
        let s = trainer.states.get_mut(role);
        s.step = step;
        for (kind, moments) in [("m", &mut s.first), ("v", &mut s.second)] {
            for (i, t) in moments.iter_mut().enumerate() {
                fill(format!("adam.{}.{kind}.{i}", role.name()), t)?;
            }
        }
    }
    if let Some(name) = stored.keys().next() {
        return Err(CheckpointError::Corrupt(format!("unexpected tensor `{name}`")));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.iteration = iteration;
    Ok(trainer)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(trainer)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Trainer, CheckpointError> {
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&buf)
}

/// Just the networks from a checkpoint.
pub fn load_models(path: &Path) -> Result<(TrainConfig, Models), CheckpointError> {
    let t = load(path)?;
    Ok((t.config, t.models))
}
