//! Bit-exact binary encodings.
//!
//! Tensor blob: magic `PLUT`, version u32 LE, dtype u8 (0 = f32,
//! 1 = f64), four u32 LE dims (n, c, h, w), then the elements as
//! little-endian IEEE-754 in row-major order.
//!
//! Checkpoint file: magic `PLUW`, version u32 LE, entry count u32 LE,
//! then per entry a u16 LE name length, the UTF-8 name, and the tensor
//! as a `PLUT` blob; after the last entry a u32 LE length followed by a
//! JSON metadata snapshot. Entry order is preserved, so save -> load ->
//! save reproduces the file byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::{dims, Dtype, Scalar, Tensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"PLUT";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PLUW";
pub const FORMAT_VERSION: u32 = 1;

fn format_err(what: impl Into<String>) -> Error {
    Error::Format(what.into())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| format_err(format!("truncated {what}: {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let d = t.dims();
    let mut header = Vec::with_capacity(4 + 4 + 1 + 16);
    header.extend_from_slice(&TENSOR_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.push(T::DTYPE as u8);
    for v in [d.n, d.c, d.h, d.w] {
        let v = u32::try_from(v).map_err(|_| format_err("dim exceeds u32"))?;
        header.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header)?;
    let mut body = Vec::with_capacity(t.len() * T::BYTE_WIDTH);
    for &v in t.data() {
        v.write_le(&mut body);
    }
    w.write_all(&body)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(format_err("bad tensor magic"));
    }
    let version = read_u32(r, "tensor version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported tensor version {version}")));
    }
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype, "tensor dtype")?;
    let dtype = Dtype::from_u8(dtype[0])?;
    if dtype != T::DTYPE {
        return Err(format_err(format!(
            "tensor holds {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let n = read_u32(r, "dims")? as usize;
    let c = read_u32(r, "dims")? as usize;
    let h = read_u32(r, "dims")? as usize;
    let w = read_u32(r, "dims")? as usize;
    let d = dims(n, c, h, w);
    d.validate()?;
    let mut body = vec![0u8; d.count() * T::BYTE_WIDTH];
    read_exact(r, &mut body, "tensor elements")?;
    let data: Vec<T> = body
        .chunks_exact(T::BYTE_WIDTH)
        .map(|chunk| T::read_le(chunk))
        .collect();
    Tensor::from_vec(d, data)
}

/// Snapshot stored at the tail of a checkpoint: enough to rebuild the
/// model and know where training stood. `best_val_f1` is `None` until
/// a validation pass has run.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ArchConfig,
    pub step: u64,
    pub epoch: u32,
    #[serde(default)]
    pub best_val_f1: Option<f64>,
    #[serde(default)]
    pub best_epoch: u32,
}

pub struct Checkpoint<T> {
    pub entries: Vec<(String, Tensor<T>)>,
    pub meta: CheckpointMeta,
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, ckpt: &Checkpoint<T>) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(ckpt.entries.len())
        .map_err(|_| format_err("too many checkpoint entries"))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in &ckpt.entries {
        let len = u16::try_from(name.len())
            .map_err(|_| format_err(format!("entry name too long: {name:?}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, tensor)?;
    }
    let meta = serde_json::to_vec(&ckpt.meta)
        .map_err(|e| format_err(format!("metadata does not serialize: {e}")))?;
    let len = u32::try_from(meta.len()).map_err(|_| format_err("metadata too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&meta)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Checkpoint<T>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format_err("bad checkpoint magic"));
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(r, "entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let len = read_u16(r, "entry name length")? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, "entry name")?;
        let name = String::from_utf8(name).map_err(|_| format_err("entry name not UTF-8"))?;
        if !seen.insert(name.clone()) {
            return Err(format_err(format!("duplicate checkpoint entry {name:?}")));
        }
        let tensor = read_tensor(r)?;
        entries.push((name, tensor));
    }
    let len = read_u32(r, "metadata length")? as usize;
    let mut meta = vec![0u8; len];
    read_exact(r, &mut meta, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta)
        .map_err(|e| format_err(format!("bad checkpoint metadata: {e}")))?;
    Ok(Checkpoint { entries, meta })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let ckpt = read_checkpoint(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(format_err("trailing bytes after checkpoint"));
    }
    Ok(ckpt)
}
