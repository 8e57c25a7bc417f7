//! Raw volume files: `"MVOL"`, three little-endian `u32` extents `x, y, z`,
//! then `x * y * z` little-endian `f32` values with `x` fastest.

use std::io::{self, Read, Write};
use std::path::Path;

use mambamim_core::masking::Grid3;
use mambamim_core::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MVOL";

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("not a volume file (bad magic {0:?})")]
    Magic([u8; 4]),
    #[error("volume tensor must be [1, z, y, x], got {0:?}")]
    Shape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_volume<T: Real, W: Write>(volume: &Tensor<T>, mut w: W) -> Result<(), VolumeError> {
    let (z, y, x) = match *volume.shape() {
        [1, z, y, x] => (z, y, x),
        _ => return Err(VolumeError::Shape(volume.shape().to_vec())),
    };
    w.write_all(MAGIC)?;
    for e in [x, y, z] {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in volume.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume<R: Read>(mut r: R) -> Result<(Grid3, Vec<f32>), VolumeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VolumeError::Magic(magic));
    }
    let mut ext = [0usize; 3];
    for e in &mut ext {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *e = u32::from_le_bytes(b) as usize;
    }
    let g = Grid3::new(ext[0], ext[1], ext[2]);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != g.len() * 4 {
        return Err(VolumeError::Io(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("expected {} values, found {} bytes", g.len(), bytes.len()),
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((g, data))
}

pub fn save<T: Real>(volume: &Tensor<T>, path: &Path) -> anyhow::Result<()> {
    use anyhow::Context;
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_volume(volume, io::BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))
}

pub fn load(path: &Path) -> anyhow::Result<(Grid3, Vec<f32>)> {
    use anyhow::Context;
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_volume(io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}
