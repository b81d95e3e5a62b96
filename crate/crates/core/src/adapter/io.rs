//! `SLAD` adapter files.
//!
//! Layout (little-endian): magic `SLAD`, u32 version, u64 base seed,
//! u32 length + UTF-8 config JSON, u32 length + UTF-8 manifest JSON,
//! u32 tensor count, the factor tensors as SLTF frames in
//! (group, split, core-then-planes) order, and a CRC32 of every
//! preceding byte. Identity cores store no tensor. Projection states are
//! rebuilt from the seeds in the config.

use std::io::Read;
use std::path::Path;

use super::{init_adapter, AdapterState, SuperLoraConfig};
use crate::error::{Error, Result};
use crate::grouping::WeightManifest;
use crate::tensor::sltf::{read_exact, read_tensor, read_u32, write_tensor};
use crate::tensor::DenseTensor;

pub const ADAPTER_MAGIC: &[u8; 4] = b"SLAD";
pub const ADAPTER_VERSION: u32 = 1;

fn factor_tensors(state: &AdapterState) -> Vec<DenseTensor> {
    let mut out = Vec::new();
    for g in state.groups() {
        for s in g.splits() {
            if !s.core_values().is_empty() {
                out.push(s.dense_core_values());
            }
            out.extend(s.planes().iter().cloned());
        }
    }
    out
}

pub fn write_adapter(state: &AdapterState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ADAPTER_MAGIC);
    buf.extend_from_slice(&ADAPTER_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.base_seed().to_le_bytes());
    for block in [state.config().to_json(), state.manifest().to_json()] {
        let bytes = block.into_bytes();
        let len =
            u32::try_from(bytes.len()).map_err(|_| Error::Format("JSON block too large".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(&bytes);
    }
    let tensors = factor_tensors(state);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        write_tensor(&mut buf, t)?;
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn read_adapter(bytes: &[u8]) -> Result<AdapterState> {
    if bytes.len() < 12 {
        return Err(Error::Format("truncated adapter header".into()));
    }
    if &bytes[..4] != ADAPTER_MAGIC {
        return Err(Error::Format("not an adapter file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != ADAPTER_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: ADAPTER_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = &body[8..];
    let mut seed = [0u8; 8];
    read_exact(&mut r, &mut seed, "base seed")?;
    let base_seed = u64::from_le_bytes(seed);
    let config_text = read_block(&mut r, "config")?;
    let manifest_text = read_block(&mut r, "manifest")?;
    let config = SuperLoraConfig::from_json(&config_text)?;
    let manifest = WeightManifest::from_json(&manifest_text)?;
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} unexpected bytes before checksum",
            r.len()
        )));
    }

    let mut state = init_adapter(&config, &manifest, base_seed)?;
    let expected = factor_tensors(&state);
    if expected.len() != tensors.len() {
        return Err(Error::Format(format!(
            "file holds {} factor tensors, configuration needs {}",
            tensors.len(),
            expected.len()
        )));
    }
    for (i, (want, got)) in expected.iter().zip(&tensors).enumerate() {
        if want.shape() != got.shape() {
            return Err(Error::Format(format!(
                "factor tensor {i} has shape {}, expected {}",
                got.shape(),
                want.shape()
            )));
        }
    }
    let values: Vec<f64> = tensors
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    state.set_params(&values)?;
    Ok(state)
}

fn read_block(r: &mut &[u8], what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > r.len() {
        return Err(Error::Format(format!("truncated {what} block")));
    }
    let mut raw = vec![0u8; len];
    r.read_exact(&mut raw)?;
    String::from_utf8(raw).map_err(|_| Error::Format(format!("{what} block is not UTF-8")))
}

pub fn save_adapter(state: &AdapterState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_adapter(state)?)?;
    Ok(())
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterState> {
    read_adapter(&std::fs::read(path)?)
}
