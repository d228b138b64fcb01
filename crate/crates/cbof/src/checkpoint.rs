//! Weight checkpoints: a flat little-endian container of named f32 tensors.
//!
//! Layout, all integers little-endian u32 unless noted:
//! ```text
//! magic   8 bytes ASCII "CBOFWT01"
//! count   number of tensors
//! per tensor:
//!   name_len, name (UTF-8, name_len bytes)
//!   ndim, dims[ndim]
//!   values: product(dims) f32, little-endian
//! ```
//! Tensors are written in the network's fixed parameter order, so two saves
//! of identical weights are identical files.

use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::{Scalar, Tensor};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CBOFWT01";

pub fn write_tensors<T: Scalar>(
    path: impl AsRef<Path>,
    entries: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let chunk = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(chunk)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path.as_ref())?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a weight checkpoint (bad magic)",
            path.as_ref().display()
        )));
    }
    let count = r.u32_le()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32_le()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32_le()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32_le()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("checkpoint has trailing bytes".into()));
    }
    Ok(entries)
}

/// Save all trainable parameters of a network.
pub fn save_network<T: Scalar>(path: impl AsRef<Path>, net: &mut Network<T>) -> Result<()> {
    let params = net.params_mut();
    let entries: Vec<(&str, &Tensor<T>)> = params
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .collect();
    write_tensors(path, &entries)
}

/// Load weights into an already-built network. Every parameter must be
/// present with its exact shape, and the file must contain nothing else.
pub fn load_network<T: Scalar>(path: impl AsRef<Path>, net: &mut Network<T>) -> Result<()> {
    let entries = read_tensors(&path)?;
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> =
        entries.into_iter().collect();
    for param in net.params_mut() {
        let loaded = by_name.remove(&param.name).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint is missing tensor '{}' (incompatible model spec?)",
                param.name
            ))
        })?;
        if loaded.shape() != param.value.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor '{}' has shape {:?}, model expects {:?}",
                param.name,
                loaded.shape(),
                param.value.shape()
            )));
        }
        for (dst, &src) in param.value.data_mut().iter_mut().zip(loaded.data()) {
            *dst = T::from_f64(src as f64);
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint contains unknown tensor '{extra}'"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{HeadKind, ModelSpec};
    use crate::rng::SeedStreams;

    #[test]
    fn tensor_container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.cbofwt");
        let a = Tensor::<f64>::from_f64s(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 0.25, -0.125]).unwrap();
        let b = Tensor::<f64>::from_f64s(&[4], &[9.0, 8.0, 7.0, 6.0]).unwrap();
        write_tensors::<f64>(&path, &[("alpha", &a), ("beta.gamma", &b)]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[1].0, "beta.gamma");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(*x as f64, *y);
        }
    }

    #[test]
    fn network_weights_survive_save_load_exactly() {
        let spec = ModelSpec {
            codewords: 4,
            hidden: 16,
            ..ModelSpec::default()
        };
        let mut net = crate::models::Network::<f32>::build(spec.clone(), &SeedStreams::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cbofwt");
        save_network(&path, &mut net).unwrap();
        let mut other = crate::models::Network::<f32>::build(spec, &SeedStreams::new(2)).unwrap();
        load_network(&path, &mut other).unwrap();
        let a: Vec<f32> = net
            .params_mut()
            .iter()
            .flat_map(|p| p.value.data().to_vec())
            .collect();
        let b: Vec<f32> = other
            .params_mut()
            .iter()
            .flat_map(|p| p.value.data().to_vec())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_weights_write_identical_bytes() {
        let spec = ModelSpec {
            codewords: 3,
            hidden: 8,
            ..ModelSpec::default()
        };
        let mut net = crate::models::Network::<f32>::build(spec, &SeedStreams::new(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.cbofwt");
        let p2 = dir.path().join("b.cbofwt");
        save_network(&p1, &mut net).unwrap();
        save_network(&p2, &mut net).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOTAWEIGHTFILE").unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cbofwt");
        let a = Tensor::<f64>::full(&[10], 1.0);
        write_tensors::<f64>(&path, &[("a", &a)]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensors(&path), Err(Error::Format(_))));
    }

    #[test]
    fn spec_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cbofwt");
        let mut net = crate::models::Network::<f32>::build(
            ModelSpec {
                codewords: 4,
                hidden: 16,
                ..ModelSpec::default()
            },
            &SeedStreams::new(1),
        )
        .unwrap();
        save_network(&path, &mut net).unwrap();
        // different codeword count: shapes disagree
        let mut wider = crate::models::Network::<f32>::build(
            ModelSpec {
                codewords: 8,
                hidden: 16,
                ..ModelSpec::default()
            },
            &SeedStreams::new(1),
        )
        .unwrap();
        assert!(matches!(
            load_network(&path, &mut wider),
            Err(Error::Format(_))
        ));
        // different head: tensors missing entirely
        let mut gmp = crate::models::Network::<f32>::build(
            ModelSpec {
                head: HeadKind::Gmp,
                hidden: 16,
                ..ModelSpec::default()
            },
            &SeedStreams::new(1),
        )
        .unwrap();
        assert!(matches!(
            load_network(&path, &mut gmp),
            Err(Error::Format(_))
        ));
    }
}
