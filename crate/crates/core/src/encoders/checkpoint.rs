//! Versioned weight container: a JSON manifest followed by flat named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RDCK" | u32 format version | u64 manifest length | manifest JSON
//! u64 tensor count | per tensor: u32 name length | name | u32 rows | u32 cols | rows*cols f64
//! ```
//!
//! Tensors are written in name order, so equal contents produce equal bytes.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RDCK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config_digest: String,
    pub role: String,
    /// Free-form metadata owned by whoever wrote the checkpoint.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mlen = r.u64()? as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { manifest, tensors })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(values: Vec<f64>) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "a.w".to_string(),
            Array2::from_shape_vec((1, values.len()), values).unwrap(),
        );
        tensors.insert("b".to_string(), Array2::zeros((0, 3)));
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                config_digest: "abc".into(),
                role: "student".into(),
                extra: serde_json::json!({"epoch": 3}),
            },
            tensors,
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40)) {
            let ck = sample(values.clone());
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.tensors["a.w"].iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(orig, got);
            prop_assert_eq!(back.manifest, ck.manifest);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_version() {
        let bytes = sample(vec![1.0, 2.0]).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(vec![0.5, -1.25]);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!path.with_extension("tmp").exists());
    }
}
