//! `NDFIELD1` model containers.
//!
//! Layout: magic (8 bytes), header length (u32 LE), JSON header with the
//! architecture, seed, time horizon and array shapes, every parameter array
//! as f64 LE in canonical order, then a SHA-256 of all preceding bytes.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, NetworkState};

pub const MODEL_MAGIC: &[u8; 8] = b"NDFIELD1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    seed: u64,
    time_horizon: f64,
    shapes: Vec<(usize, usize)>,
}

pub fn encode_model(state: &NetworkState) -> Result<Vec<u8>> {
    let header = Header {
        config: state.config.clone(),
        seed: state.seed,
        time_horizon: state.time_horizon,
        shapes: state.arrays().iter().map(|a| a.dim()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + 4 + json.len() + 8 * state.parameter_count() + 32);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for a in state.arrays() {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<NetworkState> {
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "NDFIELD1 model",
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(fmt("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fmt("checksum mismatch"));
    }
    let json_len = LittleEndian::read_u32(&body[8..12]) as usize;
    let json = body.get(12..12 + json_len).ok_or_else(|| fmt("header overruns file"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| fmt(&format!("bad header: {e}")))?;
    let mut state = NetworkState::zeroed(header.config)?;
    state.seed = header.seed;
    state.time_horizon = header.time_horizon;
    let shapes: Vec<_> = state.arrays().iter().map(|a| a.dim()).collect();
    if shapes != header.shapes {
        return Err(fmt("array shapes do not match the architecture"));
    }
    let mut payload = &body[12 + json_len..];
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if payload.len() != 8 * n {
        return Err(fmt("parameter payload has the wrong length"));
    }
    for a in state.arrays_mut() {
        for v in a.iter_mut() {
            *v = LittleEndian::read_f64(payload);
            payload = &payload[8..];
        }
    }
    state.validate()?;
    Ok(state)
}

pub fn save_model(path: &Path, state: &NetworkState) -> Result<()> {
    super::write_atomic(path, &encode_model(state)?)
}

pub fn load_model(path: &Path) -> Result<NetworkState> {
    decode_model(path, &super::read_file(path)?)
}
