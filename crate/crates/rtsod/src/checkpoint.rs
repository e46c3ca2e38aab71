//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `RTSODCK1`, version u32, config text (u32 length + UTF-8), epoch
//! u64, validation-error flag u8 + f64, rng seed u64 + word position u128,
//! optimizer flag u8 (+ step count u64 and per-tensor first/second moments
//! as raw f64 bits), tensor count u64, then per tensor: name, frozen flag,
//! shape, and values as raw f64 bits. Raw bit storage makes save/load an
//! exact round trip, so reloaded models reproduce outputs bitwise.

use crate::config::RunConfig;
use crate::nn::{AdamW, Arr, ParamStore};
use ndarray::IxDyn;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"RTSODCK1";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { found: u32 },
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error("checkpoint does not match the model: {reason}")]
    Mismatch { reason: String },
}

fn corrupt(reason: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt { reason: reason.into() }
}

#[derive(Clone, Debug)]
pub struct TensorRecord {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub val_error: Option<f64>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub optim: Option<OptimState>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Snapshots a parameter store plus training bookkeeping.
    pub fn from_store(
        store: &ParamStore,
        config: &RunConfig,
        epoch: u64,
        val_error: Option<f64>,
        rng_seed: u64,
        rng_word_pos: u128,
        optim: Option<&AdamW>,
    ) -> Self {
        let tensors = (0..store.len())
            .map(|i| TensorRecord {
                name: store.name(i).to_string(),
                frozen: store.is_frozen(i),
                shape: store.value(i).shape().to_vec(),
                data: store.value(i).as_slice().unwrap().to_vec(),
            })
            .collect();
        let optim = optim.map(|o| OptimState {
            step: o.step_count(),
            m: (0..store.len()).map(|i| o.moments(i).0.to_vec()).collect(),
            v: (0..store.len()).map(|i| o.moments(i).1.to_vec()).collect(),
        });
        Checkpoint {
            config_text: config.serialize(),
            epoch,
            val_error,
            rng_seed,
            rng_word_pos,
            optim,
            tensors,
        }
    }

    /// Parses the embedded config snapshot.
    pub fn config(&self) -> Result<RunConfig, crate::config::ConfigError> {
        RunConfig::paper().parse_str(&self.config_text)
    }

    /// Restores every tensor into a store built with the same construction
    /// order; names, shapes, and frozen flags must line up exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if self.tensors.len() != store.len() {
            return Err(CheckpointError::Mismatch {
                reason: format!(
                    "checkpoint has {} tensors, model has {}",
                    self.tensors.len(),
                    store.len()
                ),
            });
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if store.name(i) != t.name {
                return Err(CheckpointError::Mismatch {
                    reason: format!("tensor {i} is {} in checkpoint, {} in model", t.name, store.name(i)),
                });
            }
            if store.value(i).shape() != t.shape.as_slice() {
                return Err(CheckpointError::Mismatch {
                    reason: format!("tensor {} shape differs", t.name),
                });
            }
            *store.value_mut(i) = Arr::from_shape_vec(IxDyn(&t.shape), t.data.clone()).unwrap();
            store.set_frozen(i, t.frozen);
        }
        Ok(())
    }

    /// Copies all tensors whose name starts with `prefix` into the store,
    /// optionally freezing them. Returns how many were copied; it is an
    /// error if the checkpoint holds none or the store lacks one of them.
    pub fn restore_prefix(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        freeze: bool,
    ) -> Result<usize, CheckpointError> {
        let mut copied = 0;
        for t in self.tensors.iter().filter(|t| t.name.starts_with(prefix)) {
            if !store.contains(&t.name) {
                return Err(CheckpointError::Mismatch {
                    reason: format!("model has no tensor named {}", t.name),
                });
            }
            let i = store.idx(&t.name);
            if store.value(i).shape() != t.shape.as_slice() {
                return Err(CheckpointError::Mismatch {
                    reason: format!("tensor {} shape differs", t.name),
                });
            }
            *store.value_mut(i) = Arr::from_shape_vec(IxDyn(&t.shape), t.data.clone()).unwrap();
            store.set_frozen(i, freeze);
            copied += 1;
        }
        if copied == 0 {
            return Err(CheckpointError::Mismatch {
                reason: format!("checkpoint holds no tensors under {prefix}"),
            });
        }
        Ok(copied)
    }

    /// Restores optimizer moments into an optimizer built for the same
    /// store. No-op when the checkpoint carries no optimizer state.
    pub fn restore_optim(&self, opt: &mut AdamW) -> Result<(), CheckpointError> {
        if let Some(state) = &self.optim {
            if state.m.len() != self.tensors.len() {
                return Err(corrupt("optimizer state length mismatch"));
            }
            opt.restore(state.step, state.m.clone(), state.v.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io { path: path.to_path_buf(), source: e };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            write_bytes(&mut w, self.config_text.as_bytes())?;
            w.write_all(&self.epoch.to_le_bytes())?;
            w.write_all(&[self.val_error.is_some() as u8])?;
            w.write_all(&self.val_error.unwrap_or(0.0).to_le_bytes())?;
            w.write_all(&self.rng_seed.to_le_bytes())?;
            w.write_all(&self.rng_word_pos.to_le_bytes())?;
            w.write_all(&[self.optim.is_some() as u8])?;
            if let Some(o) = &self.optim {
                w.write_all(&o.step.to_le_bytes())?;
                w.write_all(&(o.m.len() as u64).to_le_bytes())?;
                for (m, v) in o.m.iter().zip(&o.v) {
                    write_f64s(&mut w, m)?;
                    write_f64s(&mut w, v)?;
                }
            }
            w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
            for t in &self.tensors {
                write_bytes(&mut w, t.name.as_bytes())?;
                w.write_all(&[t.frozen as u8])?;
                w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
                for &d in &t.shape {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                write_f64s(&mut w, &t.data)?;
            }
            w.flush()
        })()
        .map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let io = |e| CheckpointError::Io { path: path.to_path_buf(), source: e };
        let file = std::fs::File::open(path).map_err(io)?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion { found: version });
        }
        let config_bytes = read_bytes(&mut r).map_err(io)?;
        let config_text = String::from_utf8(config_bytes)
            .map_err(|_| corrupt("config text is not UTF-8"))?;
        let epoch = read_u64(&mut r).map_err(io)?;
        let has_val = read_u8(&mut r).map_err(io)? != 0;
        let val = read_f64(&mut r).map_err(io)?;
        let val_error = has_val.then_some(val);
        let rng_seed = read_u64(&mut r).map_err(io)?;
        let rng_word_pos = read_u128(&mut r).map_err(io)?;
        let has_optim = read_u8(&mut r).map_err(io)? != 0;
        let mut optim_step = None;
        let mut optim_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        if has_optim {
            optim_step = Some(read_u64(&mut r).map_err(io)?);
            let pair_count = read_u64(&mut r).map_err(io)? as usize;
            for _ in 0..pair_count {
                let m = read_f64s(&mut r).map_err(io)?;
                let v = read_f64s(&mut r).map_err(io)?;
                optim_pairs.push((m, v));
            }
        }
        let mut tensors = Vec::new();
        let count = read_u64(&mut r).map_err(io)? as usize;
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r).map_err(io)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let frozen = read_u8(&mut r).map_err(io)? != 0;
            let ndim = read_u32(&mut r).map_err(io)? as usize;
            if ndim > 8 {
                return Err(corrupt(format!("tensor {name} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r).map_err(io)? as usize);
            }
            let expect: usize = shape.iter().product();
            let data = read_f64s(&mut r).map_err(io)?;
            if data.len() != expect {
                return Err(corrupt(format!("tensor {name} length mismatch")));
            }
            tensors.push(TensorRecord { name, frozen, shape, data });
        }
        let optim = match optim_step {
            Some(step) => {
                if optim_pairs.len() != tensors.len() {
                    return Err(corrupt("optimizer state count mismatch"));
                }
                let (m, v) = optim_pairs.into_iter().unzip();
                Some(OptimState { step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            config_text,
            epoch,
            val_error,
            rng_seed,
            rng_word_pos,
            optim,
            tensors,
        })
    }
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn write_f64s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    w.write_all(&(vals.len() as u64).to_le_bytes())?;
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8<R: Read>(r: &mut R) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u128<R: Read>(r: &mut R) -> std::io::Result<u128> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64s<R: Read>(r: &mut R) -> std::io::Result<Vec<f64>> {
    let len = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
