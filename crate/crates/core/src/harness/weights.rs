use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::res2net::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"R2NW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes every tensor in store order.
///
/// Layout (little-endian): magic `R2NW`, version `u32`, tensor count `u32`,
/// then per tensor: name length `u16`, UTF-8 name, rank `u8`, dims `u32`
/// each, dtype `u8` (0 = f32) and the raw payload. Trailing unit dimensions
/// of the in-memory NCHW shape are dropped, so vectors are stored with rank
/// 1 and fully-connected weights with rank 2.
pub fn encode_weights(params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::InvalidConfig(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let shape = t.shape();
        let mut rank = 4;
        while rank > 1 && shape[rank - 1] == 1 {
            rank -= 1;
        }
        out.push(rank as u8);
        for &d in &shape[..rank] {
            let d = u32::try_from(d)
                .map_err(|_| Error::InvalidConfig(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
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
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile);
    }
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Parse(format!("{name}: rank {rank} not in 1..=4")));
        }
        let mut shape = [1usize; 4];
        for d in shape.iter_mut().take(rank) {
            *d = r.u32()? as usize;
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Parse(format!("{name}: unknown dtype {dtype}")));
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save_weights(params: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(params)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    decode_weights(&fs::read(path)?)
}
