//! Checkpoint container: magic "CGDT", version, an embedded run config,
//! a named parameter table with little-endian f32 payloads, and a trailing
//! 64-bit FNV-1a checksum over all preceding bytes. Loads validate the
//! checksum first, so a truncated or corrupted file never partially loads.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::wav::atomic_write;
use crate::model::ModelParams;
use crate::rng::fnv1a64;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CGDT";
const VERSION: u32 = 1;

/// Serialize parameters (converted to f32) plus the run config.
pub fn checkpoint_save<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    run: &RunConfig,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = run.serialize();
    bytes.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    bytes.extend_from_slice(cfg.as_bytes());
    let named = params.named();
    bytes.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &extent in tensor.shape() {
            bytes.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let checksum = fnv1a64(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    atomic_write(path, &bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let s = self.take(4)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
    }
}

/// Load a checkpoint: verify checksum and version, rebuild the model from
/// the embedded config, and fill every named tensor. Name or shape
/// mismatches against the config are errors.
pub fn checkpoint_load(path: &Path) -> Result<(ModelParams<f32>, RunConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a64(body) != stored {
        return Err(Error::Checkpoint(
            "checksum mismatch (corrupted or truncated file)".into(),
        ));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let run = RunConfig::parse(cfg_text)
        .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    let mut params = ModelParams::<f32>::init(run.model_config(), run.seed)?;
    let count = r.u32()? as usize;
    let mut expected: std::collections::HashMap<String, &mut crate::tensor::Tensor<f32>> =
        params.named_mut().into_iter().collect();
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match config ({} expected)",
            expected.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let tensor = expected
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name:?}")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name:?}: checkpoint {shape:?}, config {:?}",
                tensor.shape()
            )));
        }
        let payload = r.take(numel * 4)?;
        for (slot, chunk) in tensor.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *slot = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if !expected.is_empty() {
        let missing: Vec<&String> = expected.keys().collect();
        return Err(Error::Checkpoint(format!("missing parameters: {missing:?}")));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter table".into()));
    }
    Ok((params, run))
}
