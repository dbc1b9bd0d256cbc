//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `HTCK`, one version byte, `u32` record
//! count, then per record a `u32` name length, the UTF-8 name, a `u32`
//! rank, `u64` extents and the `f64` values. A JSON sidecar next to the
//! file lists names and shapes.
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use htrmrl_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"HTCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u8,
    pub checksum: String,
    pub parameters: Vec<SidecarEntry>,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> AppResult<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> AppResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> AppResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn corrupt(msg: String) -> AppError {
    AppError::Runtime(format!("corrupt checkpoint: {msg}"))
}

pub fn decode(bytes: &[u8]) -> AppResult<Vec<Record>> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| corrupt("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(c.u64()?).map_err(|_| corrupt("extent overflows usize".into()))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| corrupt(format!("`{name}` is too large")))?;
        let raw = c.take(
            count
                .checked_mul(8)
                .ok_or_else(|| corrupt(format!("`{name}` is too large")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        out.push(Record { name, tensor });
    }
    if c.at != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(out)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn sidecar(store: &ParamStore) -> Sidecar {
    Sidecar {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        version: VERSION,
        checksum: format!("{:016x}", store.checksum()),
        parameters: store
            .describe()
            .into_iter()
            .map(|(name, shape)| SidecarEntry { name, shape })
            .collect(),
    }
}

/// Write `path` and its sidecar.
pub fn save(store: &ParamStore, path: &Path) -> AppResult<()> {
    let mut f = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| AppError::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar(store))?;
    fs::write(&side, json + "\n").map_err(|e| AppError::io(&side, e))
}

pub fn read(path: &Path) -> AppResult<Vec<Record>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AppError::io(path, e))?;
    decode(&bytes)
}

/// Load a checkpoint into `store`; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> AppResult<()> {
    let records = read(path)?;
    store
        .load_records(records.iter().map(|r| (r.name.as_str(), r.tensor.clone())))
        .map_err(|e| AppError::Runtime(format!("architecture mismatch with {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.w",
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0]).unwrap(),
        );
        s.add("b", Tensor::new(vec![1], vec![7.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s);
        let recs = decode(&bytes).unwrap();
        assert_eq!(recs.len(), 2);
        let mut t = store();
        t.values_mut()[0] = Tensor::zeros(&[2, 3]);
        t.load_records(recs.iter().map(|r| (r.name.as_str(), r.tensor.clone())))
            .unwrap();
        assert_eq!(t.checksum(), s.checksum());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"HTCK");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        // name length, name, rank, two extents, six values
        let first = 4 + 3 + 4 + 16 + 48;
        let second = 4 + 1 + 4 + 8 + 8;
        assert_eq!(bytes.len(), 9 + first + second);
    }

    #[test]
    fn damaged_input_is_rejected() {
        let bytes = encode(&store());
        for cut in [0, 3, 8, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.htck");
        save(&store(), &p).unwrap();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(&[3, 2]));
        other.add("b", Tensor::zeros(&[1]));
        let e = load_into(&mut other, &p).unwrap_err();
        assert!(e.to_string().contains("mismatch"), "{e}");
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side.parameters[0].shape, vec![2, 3]);
        assert_eq!(side.format, "HTCK");
    }
}
