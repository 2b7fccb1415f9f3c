//! Binary checkpoint files.
//!
//! Layout, all little-endian: magic `GRK1`, u32 tensor count, then per
//! tensor a u16 name length, the UTF-8 name, a u8 rank, one u32 per
//! dimension and the f64 payload.

use std::fs;
use std::path::{Path, PathBuf};

use gatera_core::checkpoint::Checkpoint;
use gatera_core::Tensor;

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"GRK1";

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let too_big = |what: &str, name: &str| {
        LabError::Format(format!("{what} of '{name}' does not fit the format"))
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(ck.len()).map_err(|_| LabError::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &ck.tensors {
        let len = u16::try_from(name.len()).map_err(|_| too_big("name", name))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.shape().len()).map_err(|_| too_big("rank", name))?;
        out.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| too_big("dimension", name))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| {
                LabError::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(LabError::Format("missing GRK1 magic".into()));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut ck = Checkpoint::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| LabError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (bytes.len() - r.pos) / 8)
            .ok_or_else(|| LabError::Format(format!("payload of '{name}' runs past the end")))?;
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if ck.get(&name).is_some() {
            return Err(LabError::Format(format!("duplicate tensor '{name}'")));
        }
        ck.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(LabError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ck)
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        LabError::Format(m) => LabError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Where the run configuration that produced `checkpoint` is echoed.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}
