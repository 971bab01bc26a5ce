//! Binary checkpoint format.
//!
//! Layout: magic `FPFT`, format version (u32 LE), then per tensor:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dimension sizes
//! (u32 LE each), and the payload as little-endian f32 values. Tensors
//! repeat until end of stream. Round-trips are bitwise lossless because
//! stored values are kept at f32 precision.

use crate::error::{Error, Result};
use crate::tensor::Array;
use crate::transformer::{ModelConfig, TransformerModel};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FPFT";
pub const VERSION: u32 = 1;

/// Serialize named tensors to the checkpoint byte format.
pub fn tensors_to_bytes(tensors: &[(String, &Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, arr) in tensors {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(arr.shape().len() as u32).to_le_bytes());
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parse the checkpoint byte format back into named tensors.
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected FPFT")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut out = Vec::new();
    while !r.is_empty() {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated payload for `{name}`")))?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        out.push((name, Array::from_vec(&shape, data)?));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated u32 field".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Write a file atomically (temp file in the same directory, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_model(path: &Path, model: &TransformerModel) -> Result<()> {
    write_atomic(path, &tensors_to_bytes(&model.named_parameters()))
}

pub fn load_model(path: &Path, config: &ModelConfig) -> Result<TransformerModel> {
    let bytes = std::fs::read(path)?;
    let tensors = tensors_from_bytes(&bytes)?;
    TransformerModel::from_named(config, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_preserves_everything() {
        let a = Array::from_vec(&[2, 3], vec![1.0, -2.5, 0.25, 3.0, 0.0, -0.125]).unwrap();
        let b = Array::from_vec(&[4], vec![0.5, 1.5, -1.5, 2.0]).unwrap();
        let named = vec![("w".to_string(), &a), ("layers.0.b".to_string(), &b)];
        let bytes = tensors_to_bytes(&named);
        let back = tensors_from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].0, "layers.0.b");
        assert_eq!(back[1].1, b);
        // save → load → save is byte-identical
        let named_back: Vec<(String, &Array)> =
            back.iter().map(|(n, a)| (n.clone(), a)).collect();
        assert_eq!(tensors_to_bytes(&named_back), bytes);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = tensors_from_bytes(b"NOPE\x01\x00\x00\x00").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
