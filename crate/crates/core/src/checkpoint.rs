//! CPR1 parameter checkpoints.
//!
//! Layout: magic `CPR1`, then until end of file, for each tensor: u32 name
//! length, UTF-8 name, u32 rows, u32 cols, rows×cols little-endian f32.

use std::path::Path;

use crate::error::{CprError, Result};
use crate::numerics::{ParamStore, Tensor2};

pub const MAGIC: &[u8; 4] = b"CPR1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor2,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for t in tensors {
        out.extend((t.name.len() as u32).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.value.rows() as u32).to_le_bytes());
        out.extend((t.value.cols() as u32).to_le_bytes());
        for &x in t.value.data() {
            out.extend((x as f32).to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, tensor: &str, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CprError::Checkpoint {
            tensor: tensor.to_string(),
            message: format!("truncated {what} at byte {}", *pos),
        })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u32_at(bytes: &[u8], pos: &mut usize, tensor: &str, what: &str) -> Result<usize> {
    let b = take(bytes, pos, 4, tensor, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CprError::Checkpoint {
            tensor: "<header>".into(),
            message: "missing CPR1 magic".into(),
        });
    }
    let mut pos = 4;
    let mut out: Vec<NamedTensor> = Vec::new();
    while pos < bytes.len() {
        let ordinal = format!("#{}", out.len());
        let len = u32_at(bytes, &mut pos, &ordinal, "name length")?;
        let name = std::str::from_utf8(take(bytes, &mut pos, len, &ordinal, "name")?)
            .map_err(|_| CprError::Checkpoint {
                tensor: ordinal.clone(),
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        let rows = u32_at(bytes, &mut pos, &name, "row count")?;
        let cols = u32_at(bytes, &mut pos, &name, "column count")?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CprError::Checkpoint {
                tensor: name.clone(),
                message: format!("shape {rows}x{cols} overflows"),
            })?;
        let payload = take(bytes, &mut pos, n, &name, "payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(CprError::Checkpoint {
                tensor: name,
                message: "non-finite value".into(),
            });
        }
        if out.iter().any(|t| t.name == name) {
            return Err(CprError::Checkpoint {
                tensor: name,
                message: "duplicate tensor name".into(),
            });
        }
        out.push(NamedTensor {
            value: Tensor2::from_vec(rows, cols, data)?,
            name,
        });
    }
    Ok(out)
}

pub fn from_store(store: &ParamStore) -> Vec<NamedTensor> {
    store
        .ids()
        .map(|id| NamedTensor {
            name: store.name(id).to_string(),
            value: store.get(id).clone(),
        })
        .collect()
}

/// Rebuilds a store with every tensor frozen; callers re-bind trainable parts.
pub fn to_store(tensors: Vec<NamedTensor>) -> ParamStore {
    let mut store = ParamStore::new();
    for t in tensors {
        store.add(t.name, t.value, false);
    }
    store
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(&from_store(store))).map_err(|e| CprError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CprError::io(path, e))?;
    Ok(to_store(decode(&bytes)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "a".into(),
                value: Tensor2::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap(),
            },
            NamedTensor {
                name: "empty".into(),
                value: Tensor2::zeros(0, 3),
            },
        ]
    }

    #[test]
    fn round_trip() {
        assert_eq!(decode(&encode(&sample())).unwrap(), sample());
    }

    #[test]
    fn truncation_names_tensor() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 20];
        match decode(cut) {
            Err(CprError::Checkpoint { tensor, .. }) => assert_eq!(tensor, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode(b"CPR0"), Err(CprError::Checkpoint { .. })));
    }
}
