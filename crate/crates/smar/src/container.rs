//! The SMAR tensor container: the one binary format used for datasets,
//! checkpoints, and intermediate results.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic  "SMAR"            4 bytes
//! version u16              currently 1
//! count   u32              number of tensors
//! per tensor:
//!   name length  u8
//!   name bytes   (ASCII)
//!   ndim         u8
//!   dims         u32 each
//!   payload      f32 little-endian, row-major
//! ```
//!
//! Round-tripping preserves names, shapes, and payload bytes exactly.
//!
//! ```
//! use smar::container::{read_tensor_container, write_tensor_container};
//! use smar::tensor::Tensor;
//!
//! let dir = tempfile::tempdir().unwrap();
//! let path = dir.path().join("example.smar");
//! let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
//! write_tensor_container(&path, &[("weights".into(), t.clone())]).unwrap();
//! let back = read_tensor_container(&path).unwrap();
//! assert_eq!(back, vec![("weights".to_string(), t)]);
//! ```

use crate::tensor::Tensor;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SMAR";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a SMAR container")]
    BadMagic,
    #[error("unsupported container version {0} (expected {VERSION})")]
    VersionMismatch(u16),
    #[error("payload truncated while reading {0}")]
    Truncated(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("invalid tensor name {0:?} (must be non-empty ASCII, at most 255 bytes)")]
    InvalidName(String),
    #[error("tensor {name:?} is invalid: {reason}")]
    BadTensor { name: String, reason: String },
}

/// Writes `(name, tensor)` pairs to `path`. Names must be unique, non-empty
/// ASCII, at most 255 bytes.
pub fn write_tensor_container(
    path: &Path,
    named_tensors: &[(String, Tensor)],
) -> Result<(), ContainerError> {
    let mut seen = HashSet::new();
    for (name, _) in named_tensors {
        if name.is_empty() || name.len() > 255 || !name.is_ascii() {
            return Err(ContainerError::InvalidName(name.clone()));
        }
        if !seen.insert(name.as_str()) {
            return Err(ContainerError::DuplicateName(name.clone()));
        }
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(named_tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in named_tensors {
        w.write_all(&[name.len() as u8])?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads back what [`write_tensor_container`] wrote.
pub fn read_tensor_container(path: &Path) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut r, &mut magic, "header magic")?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = read_u16(&mut r, "header version")?;
    if version != VERSION {
        return Err(ContainerError::VersionMismatch(version));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;

    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for idx in 0..count {
        let ctx = format!("tensor {idx} name length");
        let name_len = read_u8(&mut r, &ctx)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_truncated(&mut r, &mut name_bytes, &format!("tensor {idx} name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ContainerError::InvalidName(format!("tensor {idx}")))?;
        if name.is_empty() || !name.is_ascii() {
            return Err(ContainerError::InvalidName(name));
        }
        if !seen.insert(name.clone()) {
            return Err(ContainerError::DuplicateName(name));
        }

        let ndim = read_u8(&mut r, &format!("{name} ndim"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, &format!("{name} dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        read_exact_or_truncated(&mut r, &mut payload, &format!("{name} payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| ContainerError::BadTensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_exact_or_truncated(
    r: &mut impl Read,
    buf: &mut [u8],
    what: &str,
) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ContainerError::Truncated(what.to_string())
        } else {
            ContainerError::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read, what: &str) -> Result<u8, ContainerError> {
    let mut b = [0u8; 1];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16, ContainerError> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_single_tensor() {
        let dir = tmp();
        let path = dir.path().join("t.smar");
        let t = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        write_tensor_container(&path, &[("a".into(), t.clone())]).unwrap();
        let back = read_tensor_container(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1, t);
    }

    #[test]
    fn roundtrip_empty_container() {
        let dir = tmp();
        let path = dir.path().join("empty.smar");
        write_tensor_container(&path, &[]).unwrap();
        assert!(read_tensor_container(&path).unwrap().is_empty());
    }

    #[test]
    fn payload_bytes_are_exact() {
        // Byte-level oracle: serialize by hand and compare files.
        let dir = tmp();
        let path = dir.path().join("bits.smar");
        let values = [0.1f32, 0.2, 0.3];
        let t = Tensor::new(vec![3], values.to_vec()).unwrap();
        write_tensor_container(&path, &[("v".into(), t)]).unwrap();

        let mut expected = Vec::new();
        expected.extend_from_slice(b"SMAR");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(1); // name length
        expected.push(b'v');
        expected.push(1); // ndim
        expected.extend_from_slice(&3u32.to_le_bytes());
        for v in values {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(std::fs::read(&path).unwrap(), expected);

        let back = read_tensor_container(&path).unwrap();
        for (a, b) in back[0].1.data().iter().zip(values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wrong_magic_is_bad_magic() {
        let dir = tmp();
        let path = dir.path().join("junk.smar");
        std::fs::write(&path, b"JUNKxxxxxxxx").unwrap();
        assert!(matches!(
            read_tensor_container(&path).unwrap_err(),
            ContainerError::BadMagic
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tmp();
        let path = dir.path().join("v9.smar");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"SMAR").unwrap();
        f.write_all(&9u16.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(
            read_tensor_container(&path).unwrap_err(),
            ContainerError::VersionMismatch(9)
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        // Declare a [4] tensor but provide two floats.
        let dir = tmp();
        let path = dir.path().join("short.smar");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SMAR");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(1);
        bytes.push(b'x');
        bytes.push(1);
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_tensor_container(&path).unwrap_err(),
            ContainerError::Truncated(_)
        ));
    }

    #[test]
    fn duplicate_name_rejected_on_write() {
        let dir = tmp();
        let path = dir.path().join("dup.smar");
        let t = Tensor::zeros(&[1]);
        let err = write_tensor_container(
            &path,
            &[("p".into(), t.clone()), ("p".into(), t)],
        )
        .unwrap_err();
        assert!(matches!(err, ContainerError::DuplicateName(_)));
    }

    #[test]
    fn invalid_names_rejected() {
        let dir = tmp();
        let path = dir.path().join("bad.smar");
        let t = Tensor::zeros(&[1]);
        assert!(matches!(
            write_tensor_container(&path, &[("".into(), t.clone())]).unwrap_err(),
            ContainerError::InvalidName(_)
        ));
        assert!(matches!(
            write_tensor_container(&path, &[("é".into(), t.clone())]).unwrap_err(),
            ContainerError::InvalidName(_)
        ));
        let long = "x".repeat(256);
        assert!(matches!(
            write_tensor_container(&path, &[(long, t)]).unwrap_err(),
            ContainerError::InvalidName(_)
        ));
    }
}
