//! Binary checkpoint files.
//!
//! Layout: magic `SDRM`, format version (u32), training step (u64), RNG
//! state (32-byte seed, u64 stream, u128 word position), a length-prefixed
//! structured-text config block, then a counted list of parameter records
//! `(name length, name bytes, rank, dims.., f64 payload)`. All integers and
//! floats are little-endian. Loading a checkpoint into a freshly built
//! model matches records to parameters by name and rejects any mismatch.

use std::collections::HashMap;
use std::io;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SDRM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: corrupt checkpoint: {what}")]
    Corrupt { path: PathBuf, what: String },
    #[error("{path}: unsupported checkpoint version {got} (this build reads version {expected})")]
    Version { path: PathBuf, got: u32, expected: u32 },
    #[error("parameter {name}: checkpoint shape {got:?} does not match model shape {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint contains parameter {name} unknown to the model")]
    UnknownParam { name: String },
    #[error("checkpoint is missing parameter {name}")]
    MissingParam { name: String },
}

/// Everything a checkpoint holds, decoded but not yet bound to a model.
#[derive(Debug)]
pub struct CheckpointData {
    pub version: u32,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub config_text: String,
    pub params: Vec<(String, Tensor)>,
}

/// Serialize training state. `config_text` is the run configuration echo;
/// it must re-parse to an equivalent configuration on load.
pub fn save_checkpoint(
    path: &Path,
    config_text: &str,
    step: u64,
    rng: &ChaCha8Rng,
    store: &ParamStore,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&rng.get_seed());
    buf.extend_from_slice(&rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    let config = config_text.as_bytes();
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, tensor) in store.iter() {
        let name = name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, what: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt { path: self.path.to_path_buf(), what: what.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "unexpected end of file at byte {} (wanted {} more bytes)",
                self.pos, n
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

/// Decode a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader { buf: &bytes, pos: 0, path };

    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic bytes (not a checkpoint file)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            path: path.to_path_buf(),
            got: version,
            expected: FORMAT_VERSION,
        });
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let config_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|e| r.corrupt(format!("config block is not UTF-8: {e}")))?;

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| r.corrupt(format!("parameter name is not UTF-8: {e}")))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.corrupt(format!("parameter {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| r.corrupt(format!("parameter {name}: shape overflows")))?;
            shape.push(d);
        }
        let payload = r.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes after last record", bytes.len() - r.pos)));
    }
    Ok(CheckpointData { version, step, rng, config_text, params })
}

/// Copy decoded parameters into a freshly built model's store, matching by
/// name. Every model parameter must be present with the model's shape, and
/// the checkpoint must not carry extras.
pub fn apply_params(data: &CheckpointData, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let mut by_name: HashMap<&str, &Tensor> = HashMap::with_capacity(data.params.len());
    for (name, tensor) in &data.params {
        by_name.insert(name.as_str(), tensor);
    }
    for (name, _) in data.params.iter() {
        if store.id_of(name).is_none() {
            return Err(CheckpointError::UnknownParam { name: name.clone() });
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let Some(loaded) = by_name.get(name.as_str()) else {
            return Err(CheckpointError::MissingParam { name });
        };
        let target = store.get_mut(id);
        if target.shape() != loaded.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: target.shape().to_vec(),
                got: loaded.shape().to_vec(),
            });
        }
        target.data_mut().copy_from_slice(loaded.data());
    }
    Ok(())
}
