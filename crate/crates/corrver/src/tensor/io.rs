//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CVT1"
//! rank    u8
//! extents rank x u32
//! dtype   u8       0 = f32, 1 = u8 affine-quantized
//! (dtype 1 only) scale f32, zero_point f32
//! payload rank-product elements (f32 or u8)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{QuantizedTensor, Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"CVT1";

/// Either payload kind the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor),
    QuantU8(QuantizedTensor),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::QuantU8(q) => &q.shape,
        }
    }

    /// Raw payload size in bytes (excludes magic, extents, dtype and the
    /// quantization fields).
    pub fn payload_bytes(&self) -> usize {
        match self {
            StoredTensor::F32(t) => t.len() * 4,
            StoredTensor::QuantU8(q) => q.codes.len(),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_stored(w, &StoredTensor::F32(t.clone()))
}

pub fn write_stored<W: Write>(w: &mut W, t: &StoredTensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    let shape = t.shape();
    w.write_all(&[shape.len() as u8])?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    match t {
        StoredTensor::F32(t) => {
            w.write_all(&[0u8])?;
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        StoredTensor::QuantU8(q) => {
            w.write_all(&[1u8])?;
            w.write_all(&q.scale.to_le_bytes())?;
            w.write_all(&q.zero_point.to_le_bytes())?;
            w.write_all(&q.codes)?;
        }
    }
    Ok(())
}

pub fn read_stored<R: Read>(r: &mut R, name: &str) -> Result<StoredTensor> {
    let fmt = |reason: &str| Error::Format { file: name.to_string(), reason: reason.to_string() };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt("bad magic, expected CVT1"));
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank).map_err(|_| fmt("truncated rank"))?;
    let rank = rank[0] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fmt(&format!("rank {rank} out of range 1..={MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf).map_err(|_| fmt("truncated extents"))?;
        let e = u32::from_le_bytes(buf) as usize;
        if e == 0 {
            return Err(fmt("zero extent"));
        }
        shape.push(e);
    }
    let numel: usize = shape.iter().product();
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype).map_err(|_| fmt("truncated dtype"))?;
    match dtype[0] {
        0 => {
            let mut data = vec![0.0f32; numel];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf).map_err(|_| fmt("truncated f32 payload"))?;
                *v = f32::from_le_bytes(buf);
            }
            Ok(StoredTensor::F32(Tensor::new(&shape, data)?))
        }
        1 => {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf).map_err(|_| fmt("truncated scale"))?;
            let scale = f32::from_le_bytes(buf);
            r.read_exact(&mut buf).map_err(|_| fmt("truncated zero_point"))?;
            let zero_point = f32::from_le_bytes(buf);
            let mut codes = vec![0u8; numel];
            r.read_exact(&mut codes).map_err(|_| fmt("truncated u8 payload"))?;
            Ok(StoredTensor::QuantU8(QuantizedTensor::new(&shape, codes, scale, zero_point)?))
        }
        d => Err(fmt(&format!("unknown dtype tag {d}"))),
    }
}

pub fn read_tensor<R: Read>(r: &mut R, name: &str) -> Result<Tensor> {
    match read_stored(r, name)? {
        StoredTensor::F32(t) => Ok(t),
        StoredTensor::QuantU8(_) => Err(Error::Format {
            file: name.to_string(),
            reason: "expected f32 tensor, found quantized payload".to_string(),
        }),
    }
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn save_stored(path: &Path, t: &StoredTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_stored(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_stored(path: &Path) -> Result<StoredTensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_stored(&mut r, &path.display().to_string())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r, &path.display().to_string())
}
