//! Parameter checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SAOOSC1"
//! repeated until EOF:
//!   u32 name_len | name bytes (UTF-8) | u32 rank | u32 dim × rank | f64 × prod(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{ParamStore, Tensor};

pub const MAGIC: &[u8; 7] = b"SAOOSC1";

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    "checkpoint",
                    format!("truncated at byte {} (wanted {n} more)", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("checkpoint", "missing SAOOSC1 header"));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::format("checkpoint", format!("parameter name: {e}")))?
            .to_string();
        if store.id(&name).is_some() {
            return Err(Error::format(
                "checkpoint",
                format!("duplicate parameter {name}"),
            ));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format("checkpoint", "size overflow"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
        _ => Error::io(path, e),
    })?;
    decode(&bytes)
}
