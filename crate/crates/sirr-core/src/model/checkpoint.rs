//! Checkpoint archive: a JSON header followed by shape-tagged little-endian
//! float32 arrays keyed by parameter path. Saving is atomic (tmp + rename)
//! and a load/save round trip is bit-exact, optimizer state included.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SIRRCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub adam_step_gen: u64,
    pub adam_step_disc: u64,
}

impl CheckpointHeader {
    pub fn new(model_config: ModelConfig, rng_seed: u64) -> Self {
        let config_hash = config_hash(&model_config);
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            model_config,
            config_hash,
            epoch: 0,
            step: 0,
            rng_seed,
            rng_word_pos: 0,
            adam_step_gen: 0,
            adam_step_disc: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Model parameters, discriminator parameters (`disc/...`) and optimizer
    /// moments (`opt/...`), all under one path namespace.
    pub tensors: BTreeMap<String, Tensor>,
}

/// Stable digest of the canonical model-config JSON; loaders refuse
/// checkpoints whose hash disagrees with the requested configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        let header = serde_json::to_vec(&ckpt.header)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &ckpt.tensors {
            let name_bytes = name.as_bytes();
            f.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            f.write_all(name_bytes)?;
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                f.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint archive", path.display())));
    }
    let header_len = read_u64(&mut f)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let count = read_u32(&mut f)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut f)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut f)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            f.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.insert(name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    Ok(Checkpoint { header, tensors })
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Split a loaded tensor map into the model store and the extra namespaces.
pub fn partition_tensors(
    tensors: BTreeMap<String, Tensor>,
) -> (ParamStore, ParamStore, BTreeMap<String, Tensor>) {
    let mut model = ParamStore::new();
    let mut disc = ParamStore::new();
    let mut rest = BTreeMap::new();
    for (k, v) in tensors {
        if let Some(stripped) = k.strip_prefix("disc/") {
            disc.insert(stripped.to_string(), v);
        } else if k.starts_with("opt/") {
            rest.insert(k, v);
        } else {
            model.insert(k, v);
        }
    }
    (model, disc, rest)
}
