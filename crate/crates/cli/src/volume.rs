//! `RFPV` volume files.
//!
//! Layout: magic `RFPV`, version `u32`, dtype `u8` (0 = f32, 1 = u8), ndim
//! `u8`, dims `u32 x ndim`, spacing `f32 x 3` in mm, then the little-endian
//! row-major payload.

use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::fsutil::{write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"RFPV";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype_code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U8(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub dims: Vec<usize>,
    pub spacing: [f32; 3],
    pub payload: Payload,
}

impl VolumeFile {
    pub fn new(dims: Vec<usize>, spacing: [f32; 3], payload: Payload) -> CliResult<Self> {
        let n: usize = dims.iter().product();
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(CliError::Config(format!("volume dims {dims:?} not representable")));
        }
        if n != payload.len() {
            return Err(CliError::Config(format!(
                "volume dims {dims:?} imply {n} values, payload has {}",
                payload.len()
            )));
        }
        Ok(Self { dims, spacing, payload })
    }

    /// The three spatial extents, for 3-d volumes.
    pub fn spatial(&self) -> Option<[usize; 3]> {
        match *self.dims.as_slice() {
            [h, w, d] => Some([h, w, d]),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.dims.len() + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.payload.dtype_code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, expected RFPV"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<CliResult<Vec<_>>>()?;
        let spacing = [r.f32()?, r.f32()?, r.f32()?];
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err("dims overflow"))?;
        let payload = match dtype {
            0 => {
                let raw = r.take(n.checked_mul(4).ok_or_else(|| r.err("dims overflow"))?)?;
                Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => Payload::U8(r.take(n)?.to_vec()),
            c => return Err(r.err(format!("unknown dtype code {c}"))),
        };
        r.finish()?;
        Ok(Self { dims, spacing, payload })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_f32(self, path: &Path) -> CliResult<Vec<f32>> {
        match self.payload {
            Payload::F32(v) => Ok(v),
            Payload::U8(_) => Err(CliError::format(path, "expected f32 payload")),
        }
    }

    pub fn into_u8(self, path: &Path) -> CliResult<Vec<u8>> {
        match self.payload {
            Payload::U8(v) => Ok(v),
            Payload::F32(_) => Err(CliError::format(path, "expected u8 payload")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = VolumeFile::new(vec![1, 2, 1], [1.0, 1.0, 2.5], Payload::U8(vec![7, 9])).unwrap();
        let b = v.to_bytes();
        assert_eq!(&b[..4], b"RFPV");
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 3);
        assert_eq!(b.len(), 4 + 4 + 2 + 12 + 12 + 2);
        assert_eq!(&b[b.len() - 2..], &[7, 9]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("x");
        let v = VolumeFile::new(vec![2], [1.0; 3], Payload::F32(vec![1.0, 2.0])).unwrap();
        let mut b = v.to_bytes();
        assert!(VolumeFile::from_bytes(&b[..b.len() - 1], p).is_err());
        b.push(0);
        assert!(VolumeFile::from_bytes(&b, p).is_err());
        b.pop();
        b[0] = b'X';
        assert!(VolumeFile::from_bytes(&b, p).is_err());
        assert!(VolumeFile::new(vec![3], [1.0; 3], Payload::U8(vec![0])).is_err());
    }
}
