//! Binary tensor files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every tensor's values as little-endian `f64` in header
//! order. Values round-trip bit-exactly.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TABMETA\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct FileHeader<H> {
    meta: H,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Writes via a temporary sibling and a rename so readers never observe a
/// partial file.
pub(crate) fn write_tensor_file<H: Serialize>(
    path: &Path,
    meta: &H,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let header = FileHeader {
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read_tensor_file<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a tensor file (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: FileHeader<H> = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in header.tensors {
        let numel: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * numel)
            .ok_or_else(|| corrupt(&format!("truncated data for `{name}`")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * numel;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((header.meta, tensors))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    header.model.check_params(params)?;
    let tensors: Vec<(String, &Tensor)> = params.iter().map(|p| (p.name.clone(), &p.value)).collect();
    write_tensor_file(path, header, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let (header, tensors): (CheckpointHeader, _) = read_tensor_file(path)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let mut params = ParamSet::new();
    for (name, t) in tensors {
        params.push(name, t);
    }
    header.model.check_params(&params)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            ff_width: 8,
            ..Default::default()
        };
        let params = cfg.init(3).unwrap();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: cfg,
            seed: 3,
            step: 0,
        };
        save_checkpoint(&path, &header, &params).unwrap();
        let (h2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(p2.checksum(), params.checksum());
        assert_eq!(p2, params);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
