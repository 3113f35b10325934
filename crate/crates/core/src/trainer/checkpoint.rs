//! The `modp-ckpt-v1` policy checkpoint format.
//!
//! The JSON manifest carries the architecture, the normalisation bounds and
//! a tensor index; the payload holds every tensor as little-endian f32 in
//! index order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::framing::{self, index_error};
use crate::error::{FormatError, Result};
use crate::policy::{Normalizer, PolicyConfig, PolicyNets};

pub const CKPT_FORMAT: &str = "modp-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub config: PolicyConfig,
    pub obs_norm: Normalizer,
    pub act_norm: Normalizer,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    /// CRC-32 of this manifest (with this field zero) and the payload.
    pub crc32: u32,
}

pub fn checkpoint_bytes(nets: &PolicyNets) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(nets.store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(nets.store.len());
    for (name, t) in nets.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        framing::push_f32(&mut payload, t.data().iter().copied());
    }
    let manifest = Manifest {
        format_version: CKPT_FORMAT.into(),
        config: nets.config.clone(),
        obs_norm: nets.obs_norm.clone(),
        act_norm: nets.act_norm.clone(),
        tensors,
        payload_bytes: payload.len(),
        crc32: 0,
    };
    framing::seal(manifest, |m| &mut m.crc32, &payload)
}

/// Rebuilds networks from checkpoint bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<PolicyNets> {
    let (manifest, payload): (Manifest, _) = framing::decode(bytes)?;
    framing::expect_format(CKPT_FORMAT, &manifest.format_version)?;
    if payload.len() != manifest.payload_bytes {
        if payload.len() < manifest.payload_bytes {
            return Err(FormatError::Truncated {
                needed: manifest.payload_bytes,
                available: payload.len(),
            }
            .into());
        }
        return Err(index_error(
            "<payload>",
            format!(
                "{} trailing bytes after the declared payload",
                payload.len() - manifest.payload_bytes
            ),
        ));
    }
    framing::verify_seal(&manifest, |m| &mut m.crc32, payload)?;
    let mut nets = PolicyNets::new(manifest.config.clone(), 0)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    load_weights(&mut nets, &manifest, payload)?;
    if manifest.obs_norm.dim() != nets.config.obs_dim
        || manifest.act_norm.dim() != nets.config.act_dim
    {
        return Err(
            FormatError::Header("normalizer widths disagree with the config".into()).into(),
        );
    }
    nets.obs_norm = manifest.obs_norm;
    nets.act_norm = manifest.act_norm;
    Ok(nets)
}

/// Copies every tensor of `manifest` into `nets`, checking names, shapes
/// and byte ranges.
pub fn load_weights(nets: &mut PolicyNets, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    let mut expected_offset = 0;
    for entry in &manifest.tensors {
        let id = nets
            .store
            .find(&entry.name)
            .ok_or_else(|| index_error(&entry.name, "not a parameter of this model"))?;
        let want = nets.store.get(id).shape().to_vec();
        if entry.shape != want {
            return Err(FormatError::TensorShape {
                name: entry.name.clone(),
                expected: want,
                found: entry.shape.clone(),
            }
            .into());
        }
        if entry.offset != expected_offset {
            return Err(index_error(
                &entry.name,
                format!(
                    "offset {} but previous tensors end at {expected_offset}",
                    entry.offset
                ),
            ));
        }
        let count: usize = want.iter().product();
        let values = framing::read_f32(payload, entry.offset, count, &entry.name)?;
        nets.store.get_mut(id).data_mut().copy_from_slice(&values);
        expected_offset += count * 4;
    }
    if manifest.tensors.len() != nets.store.len() {
        return Err(index_error(
            "<index>",
            format!(
                "checkpoint lists {} tensors, model has {}",
                manifest.tensors.len(),
                nets.store.len()
            ),
        ));
    }
    if expected_offset != manifest.payload_bytes {
        return Err(index_error(
            "<index>",
            format!(
                "tensors cover {expected_offset} bytes, payload declares {}",
                manifest.payload_bytes
            ),
        ));
    }
    Ok(())
}

pub fn save_checkpoint(nets: &PolicyNets, path: &Path) -> Result<()> {
    framing::write_file(path, &checkpoint_bytes(nets)?)
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyNets> {
    checkpoint_from_bytes(&framing::read_file(path)?)
}

/// Loads a checkpoint's weights into networks built from `config`, failing
/// with a tensor-shape error naming the first mismatching tensor.
pub fn load_checkpoint_into(bytes: &[u8], config: &PolicyConfig) -> Result<PolicyNets> {
    let (manifest, payload): (Manifest, _) = framing::decode(bytes)?;
    framing::expect_format(CKPT_FORMAT, &manifest.format_version)?;
    framing::verify_seal(&manifest, |m| &mut m.crc32, payload)?;
    let mut nets = PolicyNets::new(config.clone(), 0)?;
    load_weights(&mut nets, &manifest, payload)?;
    nets.obs_norm = manifest.obs_norm;
    nets.act_norm = manifest.act_norm;
    Ok(nets)
}
