//! Parameter checkpoints: an 8-byte little-endian manifest length, a JSON
//! manifest, then every tensor as contiguous little-endian `f64`s in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "voc-tensor-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub hyperparameters: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(store: &ParamStore, hyperparameters: serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = store
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                decay: p.decay,
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        hyperparameters,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(bad("unsupported checkpoint format or version"));
    }
    let blob = &bytes[8 + len..];
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let chunk = blob
            .get(start..start + n * 8)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.decay);
    }
    Ok((store, manifest.hyperparameters))
}

pub fn save(path: &Path, store: &ParamStore, hyperparameters: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, hyperparameters)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    from_bytes(&fs::read(path)?)
}
