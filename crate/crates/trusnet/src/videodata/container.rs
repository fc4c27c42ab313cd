//! Bit-exact binary tensor container.
//!
//! Layout: magic `TRUS1`, `u8` rank (1..=4), four `u32` little-endian dims
//! (trailing dims of lower-rank tensors are written as 1), `u8` dtype code,
//! then the payload row-major little-endian. Dtype codes: 0 = f32, 1 = u8,
//! 2 = f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TRUS1";

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// A tensor as stored in a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    F64(ArrayD<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => DTYPE_F32,
            TensorData::U8(_) => DTYPE_U8,
            TensorData::F64(_) => DTYPE_F64,
        }
    }

    fn elem_size(&self) -> usize {
        match self {
            TensorData::F32(_) => 4,
            TensorData::U8(_) => 1,
            TensorData::F64(_) => 8,
        }
    }
}

fn dims4(shape: &[usize]) -> Result<[u32; 4]> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Invalid(format!(
            "container supports rank 1..=4, got rank {}",
            shape.len()
        )));
    }
    let mut dims = [1u32; 4];
    for (i, &d) in shape.iter().enumerate() {
        dims[i] = u32::try_from(d)
            .map_err(|_| Error::Invalid(format!("dimension {d} exceeds u32 range")))?;
    }
    Ok(dims)
}

/// Write a tensor to an arbitrary writer (used standalone and inside
/// checkpoint files).
pub fn write_tensor_to<W: Write>(writer: &mut W, data: &TensorData) -> std::io::Result<()> {
    let dims = dims4(data.shape()).expect("shape validated by caller");
    writer.write_all(MAGIC)?;
    writer.write_all(&[data.shape().len() as u8])?;
    for d in dims {
        writer.write_all(&d.to_le_bytes())?;
    }
    writer.write_all(&[data.dtype_code()])?;
    match data {
        TensorData::F32(a) => {
            let mut buf = Vec::with_capacity(a.len() * 4);
            for &v in a.as_standard_layout().as_slice().unwrap() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            writer.write_all(&buf)?;
        }
        TensorData::U8(a) => {
            writer.write_all(a.as_standard_layout().as_slice().unwrap())?;
        }
        TensorData::F64(a) => {
            let mut buf = Vec::with_capacity(a.len() * 8);
            for &v in a.as_standard_layout().as_slice().unwrap() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            writer.write_all(&buf)?;
        }
    }
    Ok(())
}

/// Read a tensor from an arbitrary reader. The `path` is used only for
/// diagnostics.
pub fn read_tensor_from<R: Read>(reader: &mut R, path: &Path) -> Result<TensorData> {
    let mut magic = [0u8; 5];
    read_exact_or(reader, &mut magic, path, "header")?;
    if &magic != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic bytes {magic:?}, expected {MAGIC:?}"),
        ));
    }
    let mut rank = [0u8; 1];
    read_exact_or(reader, &mut rank, path, "rank byte")?;
    let rank = rank[0] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::format(path, format!("invalid rank {rank}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut raw = [0u8; 4];
        read_exact_or(reader, &mut raw, path, "dimension field")?;
        *d = u32::from_le_bytes(raw) as usize;
    }
    for (i, &d) in dims.iter().enumerate() {
        if i >= rank && d != 1 {
            return Err(Error::format(
                path,
                format!("trailing dim {i} must be 1 for rank {rank}, got {d}"),
            ));
        }
        if d == 0 {
            return Err(Error::format(path, format!("zero-sized dimension {i}")));
        }
    }
    let mut dtype = [0u8; 1];
    read_exact_or(reader, &mut dtype, path, "dtype byte")?;
    let shape: Vec<usize> = dims[..rank].to_vec();
    let n: usize = shape.iter().product();
    let elem = match dtype[0] {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        DTYPE_F64 => 8,
        other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
    };
    let expected = n * elem;
    let mut payload = vec![0u8; expected];
    let got = read_up_to(reader, &mut payload).map_err(|e| Error::io(path, e))?;
    if got != expected {
        return Err(Error::format(
            path,
            format!("truncated payload: expected {expected} bytes, got {got}"),
        ));
    }
    let data = match dtype[0] {
        DTYPE_F32 => {
            let vals: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F32(ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap())
        }
        DTYPE_U8 => TensorData::U8(ArrayD::from_shape_vec(IxDyn(&shape), payload).unwrap()),
        DTYPE_F64 => {
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TensorData::F64(ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap())
        }
        _ => unreachable!(),
    };
    Ok(data)
}

fn read_exact_or<R: Read>(reader: &mut R, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, format!("truncated {what}"))
        } else {
            Error::io(path, e)
        }
    })
}

fn read_up_to<R: Read>(reader: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Write a tensor container file.
pub fn write_tensor(path: &Path, data: &TensorData) -> Result<()> {
    dims4(data.shape())?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_tensor_to(&mut writer, data).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a tensor container file, rejecting trailing garbage.
pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let data = read_tensor_from(&mut reader, path)?;
    let mut probe = [0u8; 1];
    let extra = reader.read(&mut probe).map_err(|e| Error::io(path, e))?;
    if extra != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let _ = data.elem_size();
    Ok(data)
}
