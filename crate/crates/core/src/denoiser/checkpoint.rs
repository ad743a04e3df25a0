//! Single-file checkpoint: magic line, little-endian `u64` header length, JSON
//! header, then raw little-endian `f32` arrays (parameters, then optional
//! optimizer moments).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, DenoiserConfig, TrainState, Trainer};
use crate::diffusion::ScheduleParams;
use crate::io::write_atomic;
use crate::nn::{Adam, AdamConfig, ParamTable};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "S2M-CKPT-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    config: DenoiserConfig,
    schedule: Option<ScheduleParams>,
    init_seed: u64,
    train_state: TrainState,
    param_count: usize,
    param_table: ParamTable,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

/// Everything restored from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub optimizer: Option<Adam<f32>>,
    pub state: TrainState,
}

impl Checkpoint {
    /// Trainer ready to continue; a fresh optimizer is created when none was stored.
    pub fn into_trainer(self, fallback: AdamConfig) -> Trainer {
        let len = self.denoiser.params().len();
        Trainer {
            denoiser: self.denoiser,
            optimizer: self.optimizer.unwrap_or_else(|| Adam::new(fallback, len)),
            state: self.state,
        }
    }
}

pub fn save_checkpoint(
    path: &Path,
    denoiser: &Denoiser,
    optimizer: Option<&Adam<f32>>,
    state: &TrainState,
) -> Result<()> {
    let header = Header {
        format: CHECKPOINT_MAGIC.to_string(),
        config: denoiser.config().clone(),
        schedule: denoiser.schedule().copied(),
        init_seed: denoiser.init_seed(),
        train_state: state.clone(),
        param_count: denoiser.params().len(),
        param_table: denoiser.param_table().clone(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let arrays = 1 + 2 * usize::from(optimizer.is_some());
    let mut bytes = Vec::with_capacity(json.len() + 32 + 4 * arrays * denoiser.params().len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    let mut put = |v: &[f32]| v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
    put(denoiser.params());
    if let Some(o) = optimizer {
        put(&o.m);
        put(&o.v);
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let magic = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic + 9 || &bytes[..magic] != CHECKPOINT_MAGIC.as_bytes() || bytes[magic] != b'\n' {
        return Err(bad("not an S2M-CKPT-v1 file"));
    }
    let mut pos = magic + 1;
    let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let json = bytes
        .get(pos..pos.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    pos += hlen;
    if header.format != CHECKPOINT_MAGIC {
        return Err(bad("unsupported format version"));
    }
    let n = header.param_count;
    let arrays = 1 + 2 * usize::from(header.optimizer.is_some());
    if bytes.len() - pos != 4 * n * arrays {
        return Err(bad("payload size does not match header"));
    }
    let mut take = || -> Vec<f32> {
        let v = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos += 4 * n;
        v
    };
    let params = take();
    let optimizer = header.optimizer.as_ref().map(|o| Adam {
        config: o.config,
        m: take(),
        v: take(),
        step: o.step,
    });
    let denoiser = Denoiser::from_parts(header.config, params, header.init_seed, header.schedule)?;
    if denoiser.param_table() != &header.param_table {
        return Err(bad("parameter layout does not match the configured network"));
    }
    Ok(Checkpoint {
        denoiser,
        optimizer,
        state: header.train_state,
    })
}
