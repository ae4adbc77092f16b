//! Checkpoint container for named parameter tensors.
//!
//! Layout, all integers little-endian:
//!   magic "DFLT" | u32 version | u64 meta length | meta JSON |
//!   u32 tensor count | tensors... | u64 FNV-1a checksum of everything before
//! Each tensor: u16 name length | name | u8 dtype tag | u32 ndim | u32 dims...
//! | raw element bytes. Round-trips are bitwise exact; the checksum is
//! verified on load. Adapter checkpoints hold only the trainable parameters
//! plus the head, which is what makes per-task files small.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::params::ParamSet;
use crate::tensor::{Dtype, Element, TensorData};

pub const CKPT_MAGIC: &[u8; 4] = b"DFLT";
pub const CKPT_VERSION: u32 = 1;

pub fn encode_checkpoint<E: Element>(meta_json: &str, params: &ParamSet<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let meta = meta_json.as_bytes();
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.tag());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    }
    let checksum = {
        let mut h = Fnv64::new();
        h.update(&out);
        h.finish()
    };
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn decode_checkpoint<E: Element>(bytes: &[u8]) -> Result<(String, ParamSet<E>)> {
    if bytes.len() < 8 {
        return Err(Error::Format { offset: 0, message: "shorter than checksum trailer".into() });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    let computed = {
        let mut h = Fnv64::new();
        h.update(body);
        h.finish()
    };
    if stored != computed {
        return Err(Error::Integrity(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Format {
                offset: *pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"DFLT\"") });
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unknown version {version}") });
    }
    let meta_len = u64::from_le_bytes(take(&mut pos, 8, "meta length")?.try_into().unwrap()) as usize;
    let meta = String::from_utf8(take(&mut pos, meta_len, "meta")?.to_vec())
        .map_err(|_| Error::Format { offset: pos as u64, message: "meta is not UTF-8".into() })?;
    let count = u32::from_le_bytes(take(&mut pos, 4, "tensor count")?.try_into().unwrap()) as usize;

    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec())
            .map_err(|_| Error::Format { offset: pos as u64, message: "tensor name is not UTF-8".into() })?;
        let tag = take(&mut pos, 1, "dtype")?[0];
        let dtype = Dtype::from_tag(tag).ok_or(Error::Format {
            offset: pos as u64 - 1,
            message: format!("unknown dtype tag {tag}"),
        })?;
        if dtype != E::DTYPE {
            return Err(Error::Integrity(format!(
                "tensor {name:?} stored as {dtype:?}, loading as {:?}",
                E::DTYPE
            )));
        }
        let ndim = u32::from_le_bytes(take(&mut pos, 4, "ndim")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4, "dim")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * E::DTYPE.byte_width(), "tensor data")?;
        let data = raw.chunks_exact(E::DTYPE.byte_width()).map(E::read_le).collect();
        params.insert(name, TensorData::new(shape, data)?);
    }
    if pos != body.len() {
        return Err(Error::Format {
            offset: pos as u64,
            message: format!("trailing {} bytes after last tensor", body.len() - pos),
        });
    }
    Ok((meta, params))
}

pub fn save_checkpoint<E: Element>(path: &Path, meta_json: &str, params: &ParamSet<E>) -> Result<()> {
    let bytes = encode_checkpoint(meta_json, params);
    let tmp = path.with_extension("dflt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<(String, ParamSet<E>)> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}
