//! Named-array checkpoint archive.
//!
//! Layout: the magic bytes, a little-endian `u64` manifest length, the JSON
//! manifest, then every array as raw little-endian `f32`. The manifest holds
//! the config, its hash, the step, the optimizer scalars, the array index and
//! a SHA-256 of the payload. Files are written to a temporary sibling and
//! renamed into place, so an interrupted save never replaces a good file.

use std::fs;
use std::io::Write;
use std::path::Path;

use igc_tensor::{numel, Adam, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nets::ModelParameters;
use crate::train::TrainState;

const MAGIC: &[u8; 8] = b"IGCCKPT1";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: String,
    config_hash: String,
    step: u64,
    optimizer: OptimizerEntry,
    arrays: Vec<ArrayEntry>,
    payload_len: usize,
    payload_sha256: String,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub config_hash: String,
    pub state: TrainState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn groups(state: &TrainState) -> Vec<(&'static str, Vec<(&str, &Tensor)>)> {
    let names: Vec<&str> = state.params.trainable.names().collect();
    vec![
        ("trainable", state.params.trainable.iter().collect()),
        ("frozen", state.params.frozen.iter().collect()),
        ("adam.first", names.iter().copied().zip(&state.optimizer.first).collect()),
        ("adam.second", names.iter().copied().zip(&state.optimizer.second).collect()),
    ]
}

/// Write `state` under `cfg` to `path` atomically.
pub fn save_checkpoint(path: &Path, cfg: &Config, state: &TrainState) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (group, entries) in groups(state) {
        for (name, t) in entries {
            arrays.push(ArrayEntry {
                group: group.to_string(),
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            payload.reserve(4 * t.len());
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let opt = &state.optimizer;
    let manifest = Manifest {
        config: cfg.to_toml_string(),
        config_hash: cfg.hash(),
        step: state.step,
        optimizer: OptimizerEntry {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            step: opt.step,
        },
        arrays,
        payload_len: offset,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&manifest)?;

    let ctx = || path.display().to_string();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
        f.write_all(MAGIC)
            .and_then(|_| f.write_all(&(header.len() as u64).to_le_bytes()))
            .and_then(|_| f.write_all(&header))
            .and_then(|_| f.write_all(&payload))
            .and_then(|_| f.sync_all())
            .map_err(|e| Error::io(ctx(), e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Read a checkpoint and check it against its own config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "missing magic header"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt(path, "truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(path, format!("bad manifest: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() != 4 * manifest.payload_len {
        return Err(corrupt(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), 4 * manifest.payload_len),
        ));
    }
    if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(corrupt(path, "payload checksum mismatch"));
    }
    let config = Config::from_toml_str(&manifest.config).map_err(|e| corrupt(path, format!("stored config: {e}")))?;
    if config.hash() != manifest.config_hash {
        return Err(corrupt(path, "stored config does not match its hash"));
    }

    let mut trainable = ParamStore::new();
    let mut frozen = ParamStore::new();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for a in &manifest.arrays {
        let n = numel(&a.shape);
        let end = a.offset.checked_add(n).filter(|&e| e <= manifest.payload_len);
        let end = end.ok_or_else(|| corrupt(path, format!("array `{}` exceeds the payload", a.name)))?;
        let data = payload[4 * a.offset..4 * end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&a.shape, data);
        match a.group.as_str() {
            "trainable" => trainable.insert(a.name.clone(), t)?,
            "frozen" => frozen.insert(a.name.clone(), t)?,
            "adam.first" => first.push(t),
            "adam.second" => second.push(t),
            other => return Err(corrupt(path, format!("unknown array group `{other}`"))),
        }
    }
    let params = ModelParameters { trainable, frozen };
    params.validate(&config)?;
    let shapes_match = |m: &[Tensor]| {
        m.len() == params.trainable.len() && m.iter().zip(params.trainable.iter()).all(|(a, (_, b))| a.shape() == b.shape())
    };
    if !shapes_match(&first) || !shapes_match(&second) {
        return Err(corrupt(path, "optimizer moments do not mirror the parameters"));
    }
    let o = &manifest.optimizer;
    let optimizer = Adam {
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        step: o.step,
        first,
        second,
    };
    Ok(Checkpoint {
        config,
        config_hash: manifest.config_hash,
        state: TrainState {
            params,
            optimizer,
            step: manifest.step,
        },
    })
}

/// Read a checkpoint for use under `cfg`. A different config hash is an
/// error unless `force` is set; parameter shapes must match `cfg` either way.
pub fn load_checkpoint_for(path: &Path, cfg: &Config, force: bool) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let expected = cfg.hash();
    if ck.config_hash != expected {
        if !force {
            return Err(Error::ConfigMismatch {
                expected,
                found: ck.config_hash,
            });
        }
        log::warn!("loading {} under a different config (forced)", path.display());
        ck.state.params.validate(cfg)?;
    }
    Ok(ck)
}
