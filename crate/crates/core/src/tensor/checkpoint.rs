//! Little-endian binary container for named tensors.
//!
//! ```text
//! magic     4 bytes  "EZCK"
//! version   u32
//! meta_len  u32, then meta_len bytes of UTF-8 (JSON metadata)
//! count     u32
//! per entry:
//!   name_len u32, name bytes
//!   trainable u8 (1 parameter, 0 buffer)
//!   dtype    u8 (4 = f32, 8 = f64)
//!   ndim     u32, then ndim × u64 dims
//!   values   product(dims) × dtype bytes
//! ```

use std::io::{Read, Write};

use super::{ParamStore, Real, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EZCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointData<T> {
    pub metadata: String,
    pub entries: Vec<(String, bool, Tensor<T>)>,
}

impl<T: Real> CheckpointData<T> {
    pub fn from_store(store: &ParamStore<T>, metadata: String) -> Self {
        CheckpointData {
            metadata,
            entries: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.trainable, p.value.clone()))
                .collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.entries.iter().map(|(n, _, t)| (n.clone(), t.clone())).collect()
    }
}

pub fn write_checkpoint<T: Real, W: Write>(w: &mut W, data: &CheckpointData<T>) -> Result<(), TensorError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(data.metadata.len() as u32).to_le_bytes())?;
    w.write_all(data.metadata.as_bytes())?;
    w.write_all(&(data.entries.len() as u32).to_le_bytes())?;
    for (name, trainable, t) in &data.entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(*trainable), T::DTYPE])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&T::to_le_bytes_vec(t.data()))?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String, TensorError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| TensorError::Checkpoint(e.to_string()))
}

/// Reads a checkpoint, converting stored values to `T` whatever their width.
pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<CheckpointData<T>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u32(r)? as usize;
    let metadata = read_string(r, meta_len)?;
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let trainable = flags[0] == 1;
        let width = flags[1] as usize;
        if width != 4 && width != 8 {
            return Err(TensorError::Checkpoint(format!("`{name}`: unknown dtype {width}")));
        }
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * width];
        r.read_exact(&mut raw)?;
        let values: Vec<T> = raw
            .chunks(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::from_le_chunk(c) as f64)
                } else {
                    T::of(f64::from_le_chunk(c))
                }
            })
            .collect();
        entries.push((name, trainable, Tensor::new(shape, values)?));
    }
    Ok(CheckpointData { metadata, entries })
}
