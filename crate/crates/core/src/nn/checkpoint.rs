//! Named-tensor checkpoint container shared by both branches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "ESCKPT01"
//! count   u32      number of tensors
//! repeat count times:
//!   name_len u32, name UTF-8 bytes
//!   ndim     u32, dims u64 x ndim
//!   data     f32 x prod(dims), row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ESCKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.tensor.ndim() as u32).to_le_bytes());
        for &d in t.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        if self.bytes.len() < n {
            return Err("unexpected end of file".into());
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<NamedTensor>, String> {
    let mut r = Reader { bytes };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or("tensor too large")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::from_vec(&shape, data),
        });
    }
    if !r.bytes.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: Vec<NamedTensor> = store
        .params()
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            tensor: p.value.clone(),
        })
        .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(&tensors)).map_err(|e| Error::io(path, e))
}

/// Overwrites `store` with a checkpoint whose names and shapes must match it exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let tensors = decode(&bytes).map_err(|reason| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    })?;
    if tensors.len() != store.len() {
        return Err(Error::Config(format!(
            "checkpoint {} holds {} tensors, model expects {}",
            path.display(),
            tensors.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (t, id) in tensors.into_iter().zip(ids) {
        let p = store.param_mut(id);
        if p.name != t.name || p.value.shape() != t.tensor.shape() {
            return Err(Error::Config(format!(
                "checkpoint {} entry `{}` {:?} does not match model entry `{}` {:?}",
                path.display(),
                t.name,
                t.tensor.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = t.tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_as_documented() {
        let t = NamedTensor {
            name: "w".into(),
            tensor: Tensor::from_vec(&[2], vec![1.0, -2.5]),
        };
        let bytes = encode(std::slice::from_ref(&t));
        let mut want = b"ESCKPT01".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'w');
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode(&bytes).unwrap(), vec![t]);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let t = NamedTensor {
            name: "abc".into(),
            tensor: Tensor::zeros(&[3, 2]),
        };
        let bytes = encode(&[t]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTACKPT").is_err());
    }

    #[test]
    fn mismatched_store_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut a = ParamStore::new();
        a.add("x", Tensor::zeros(&[2]));
        save(&a, &path).unwrap();
        let mut b = ParamStore::new();
        b.add("x", Tensor::zeros(&[3]));
        assert!(matches!(load_into(&mut b, &path), Err(Error::Config(_))));
    }
}
