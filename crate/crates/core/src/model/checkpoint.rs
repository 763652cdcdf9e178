//! Parameter archive.
//!
//! Layout: the 8-byte magic `FPCKPT\0\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (config, init
//! seed and a manifest of `(name, shape, dtype, offset)` per tensor), then
//! every parameter as little-endian `f64` in layout order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForecasterState, ModelConfig, ModelError, ParamLayout};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FPCKPT\0\0";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    init_seed: u64,
    num_params: usize,
    tensors: Vec<ManifestTensor>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

pub fn write_checkpoint<W: Write>(state: &ForecasterState, mut out: W) -> Result<(), ModelError> {
    let header = Header {
        config: state.config().clone(),
        init_seed: state.init_seed(),
        num_params: state.num_params(),
        tensors: state
            .layout()
            .tensors()
            .iter()
            .map(|t| ManifestTensor { name: t.name.clone(), shape: t.shape.clone(), dtype: "f64".into(), offset: t.offset })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(state.num_params() * 8);
    for p in state.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ForecasterState, ModelError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("not a parameter archive (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    header.config.validate()?;

    // The manifest must describe exactly the layout this build derives from the config.
    let layout = ParamLayout::new(&header.config);
    let expected: Vec<ManifestTensor> = layout
        .tensors()
        .iter()
        .map(|t| ManifestTensor { name: t.name.clone(), shape: t.shape.clone(), dtype: "f64".into(), offset: t.offset })
        .collect();
    if header.tensors != expected || header.num_params != layout.num_params() {
        return Err(ModelError::Checkpoint("tensor manifest does not match the config's layout".into()));
    }

    let mut raw = vec![0u8; header.num_params * 8];
    input.read_exact(&mut raw)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ForecasterState::from_params(&header.config, params, header.init_seed)
}

pub fn save_checkpoint(state: &ForecasterState, path: &Path) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(state, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<ForecasterState, ModelError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { input_patch_len: 4, output_patch_len: 8, num_layers: 1, hidden_dim: 8, num_heads: 1, max_context: 16 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let state = ForecasterState::init_random(&cfg(), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&state, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config(), state.config());
        assert_eq!(back.init_seed(), 9);
        let a: Vec<u64> = state.params().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = back.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let state = ForecasterState::init_random(&cfg(), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&state, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(ModelError::Checkpoint(_))));
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
