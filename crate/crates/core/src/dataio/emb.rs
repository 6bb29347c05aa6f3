//! The EMB1 embedding container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMB1" | u32 version=1 | u32 N | u32 d | u32 C | u8 has_labels
//! N*d f32 features, row-major
//! N u32 labels                       (only when has_labels = 1)
//! C x (u32 byte length, UTF-8 name)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CprError, Result};
use crate::numerics::kernels::normalize_rows;
use crate::numerics::Tensor2;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;

/// Frozen feature vectors with optional labels and a class-name table.
///
/// Features are held as 64-bit reals; the file stores 32-bit values, and the
/// widening on read is exact, so an unmodified set writes back bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Tensor2,
    labels: Option<Vec<usize>>,
    class_names: Vec<String>,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(features: Tensor2, labels: Option<Vec<usize>>, class_names: Vec<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(CprError::InsufficientData("embedding set with zero rows".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(CprError::shape(format!(
                    "{} labels for {} features",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
                return Err(CprError::Index(format!(
                    "record {i} has label {l} but only {} classes",
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            class_names,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Returns the labels or an error naming what needed them.
    pub fn require_labels(&self, purpose: &str) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| CprError::InsufficientData(format!("{purpose} requires a labeled set")))
    }

    /// Indices of samples carrying `class`, ascending.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        match &self.labels {
            Some(l) => l
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == class)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }

    /// Copy with every feature row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let features = normalize_rows(&self.features)
            .map_err(|e| CprError::Degenerate(format!("cannot normalize features: {e}")))?;
        Ok(Self {
            features,
            normalized: true,
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.features.shape();
        let mut out = Vec::with_capacity(21 + n * d * 4 + n * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, n as u32, d as u32, self.class_names.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(u8::from(self.labels.is_some()));
        for &x in self.features.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CprError::Format {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"EMB1\""),
            });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(version_at, format!("unsupported version {version}")));
        }
        let n = r.u32("record count")? as usize;
        let d = r.u32("dimension")? as usize;
        let c = r.u32("class count")? as usize;
        let flag_at = r.pos;
        let has_labels = match r.u8("label flag")? {
            0 => false,
            1 => true,
            other => return Err(r.error_at(flag_at, format!("label flag must be 0 or 1, got {other}"))),
        };
        if n == 0 {
            return Err(r.error_at(4, "record count is zero".into()));
        }

        let feature_bytes = n
            .checked_mul(d)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| r.error_at(8, "feature payload size overflows".into()))?;
        let payload = r.take(feature_bytes, "feature payload")?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(r.error_at(
                (21 + 4 * i) as u64,
                format!("non-finite feature in record {}", i / d.max(1)),
            ));
        }

        let labels = if has_labels {
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let at = r.pos;
                let l = r.u32("labels")? as usize;
                if l >= c {
                    return Err(r.error_at(at, format!("record {i} has label {l} but C = {c}")));
                }
                labels.push(l);
            }
            Some(labels)
        } else {
            None
        };

        let mut class_names = Vec::with_capacity(c);
        for i in 0..c {
            let len = r.u32("class name length")? as usize;
            let at = r.pos;
            let raw = r.take(len, "class name")?;
            let name =
                std::str::from_utf8(raw).map_err(|e| r.error_at(at, format!("class name {i} is not UTF-8: {e}")))?;
            class_names.push(name.to_string());
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let features = Tensor2::from_vec(n, d, data)?;
        Ok(Self {
            features,
            labels,
            class_names,
            normalized: false,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: impl TryInto<u64>, message: String) -> CprError {
        CprError::Format {
            offset: offset.try_into().unwrap_or(u64::MAX),
            message,
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!(
                    "truncated {what}: need {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Reads an EMB1 file without altering its payload.
pub fn read_emb(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CprError::io(path, e))?;
    EmbeddingSet::from_bytes(&bytes)
}

/// Reads an EMB1 file and L2-normalizes every feature row.
pub fn load_emb(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    read_emb(path)?.normalized()
}

pub fn write_emb(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_bytes()).map_err(|e| CprError::io(path, e))
}
