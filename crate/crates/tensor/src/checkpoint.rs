//! `MFCK` checkpoint files: a flat list of named little-endian f32 tensors.
//!
//! Layout: magic `MFCK`, version `u16`, count `u32`, then per tensor a `u16`
//! name length, the UTF-8 name, a `u8` rank, `u32` dims and the values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFCK";
pub const VERSION: u16 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Checkpoint(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TensorError::Checkpoint(format!("dimension too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| TensorError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_exact::<4, _>(&mut r)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| TensorError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_exact::<1, _>(&mut r)?[0] as usize;
        let dims = (0..rank)
            .map(|_| read_exact::<4, _>(&mut r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| TensorError::Checkpoint(format!("truncated data for {name}: {e}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(&dims, data).map_err(|e| TensorError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

impl ParamStore {
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self.iter().collect();
        save(path, &entries)
    }

    /// Loads values into an already-built store; every name must match.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let entries = load(path)?;
        if entries.len() != self.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} tensors, file has {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, t) in &entries {
            self.assign(name, t)?;
        }
        Ok(())
    }
}
