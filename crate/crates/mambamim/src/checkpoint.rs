//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMIM"  u32 version  u32 count
//! count x { u32 name_len, name (UTF-8), u8 dtype, u32 rank, rank x u32 dim, values }
//! ```
//!
//! `dtype` is 0 for f32 and 1 for f64; values are stored in that width.

use std::io::{self, Read, Write};
use std::path::Path;

use mambamim_core::{DType, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MMIM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("parameter name is not UTF-8")]
    Name,
    #[error("tensor {name:?}: {reason}")]
    Tensor { name: String, reason: String },
    #[error("checkpoint does not match the configured model")]
    Mismatch(#[source] mambamim_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One stored tensor, values widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_store<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[T::DTYPE as u8])?;
        w.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            match T::DTYPE {
                DType::F32 => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                DType::F64 => w.write_all(&v.as_f64().to_le_bytes())?,
            }
        }
    }
    w.flush()
}

fn u32_of(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic(magic));
    }
    let version = u32_of(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32_of(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_of(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0]).ok_or(CheckpointError::DType(code[0]))?;
        let rank = u32_of(&mut r)? as usize;
        let shape = (0..rank).map(|_| u32_of(&mut r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel.min(1 << 24));
        for _ in 0..numel {
            values.push(match dtype {
                DType::F32 => {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    f32::from_le_bytes(b) as f64
                }
                DType::F64 => {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    f64::from_le_bytes(b)
                }
            });
        }
        out.push(Entry { name, dtype, shape, values });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Io(io::Error::new(io::ErrorKind::InvalidData, "trailing bytes after last tensor")));
    }
    Ok(out)
}

/// Loads entries into `store`, checking names and shapes.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<(), CheckpointError> {
    let values = entries
        .iter()
        .map(|e| {
            let data = e.values.iter().map(|&v| T::lit(v)).collect();
            Tensor::new(e.shape.clone(), data)
                .map(|t| (e.name.clone(), t))
                .map_err(|err| CheckpointError::Tensor { name: e.name.clone(), reason: err.to_string() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    store.load_values(&values).map_err(CheckpointError::Mismatch)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> anyhow::Result<()> {
    use anyhow::Context;
    let f = std::fs::File::create(path).with_context(|| format!("creating checkpoint {}", path.display()))?;
    write_store(store, io::BufWriter::new(f)).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> anyhow::Result<()> {
    use anyhow::Context;
    let f = std::fs::File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let entries = read_entries(io::BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))?;
    load_into(store, &entries).with_context(|| format!("loading checkpoint {}", path.display()))
}
