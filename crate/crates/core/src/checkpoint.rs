//! Parameter blobs with a JSON sidecar, shared by every trainable model.
//!
//! Blob layout: magic `OBIW`, u32 format version, u64 value count, then the
//! parameters as little-endian f32 in module visiting order. The sidecar is
//! `<blob>.json`.

use crate::error::{invalid, Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"OBIW";
const BLOB_VERSION: u32 = 1;

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> Vec<u8> {
    let values = model.flat_values();
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
    }
    out
}

pub fn decode_params<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, bytes: &[u8]) -> Result<()> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::ModelState("not a parameter blob".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(Error::ModelState(format!("unsupported blob version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * n {
        return Err(Error::ModelState(format!("blob declares {n} values but holds {} bytes", bytes.len() - 16)));
    }
    let values: Vec<T> = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
        .collect();
    model.load_flat_values(&values).map_err(|e| Error::ModelState(e.to_string()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save<T: Scalar, M: Module<T> + ?Sized, S: Serialize>(model: &M, sidecar: &S, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(model))?;
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(sidecar)?.as_bytes())
}

pub fn read_sidecar<S: DeserializeOwned>(path: &Path) -> Result<S> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p)
        .map_err(|e| Error::ModelState(format!("cannot read checkpoint sidecar {}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_blob(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::ModelState(format!("cannot read checkpoint {}: {e}", path.display())))
}

pub(crate) fn expect_kind(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(invalid(format!("checkpoint kind is {found:?}, expected {expected:?}")));
    }
    Ok(())
}
