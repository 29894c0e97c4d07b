//! `QMVW1` weight files.
//!
//! Layout: the five magic bytes `QMVW1`, then one record per parameter in
//! name order until end of file. A record is the name length (u64), the
//! UTF-8 name, the rank (u64), each extent (u64) and finally the values as
//! f64. All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"QMVW1";

const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 16;

pub fn write_weights<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in store.iter() {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::Format(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(TensorError::Format("missing QMVW1 magic".into()));
    }
    let mut cur = Cursor {
        buf,
        pos: MAGIC.len(),
    };
    let mut store = ParamStore::new();
    while cur.pos < buf.len() {
        let name_len = cur.u64("name length")?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(TensorError::Format(format!("bad name length {name_len}")));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| TensorError::Format("name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u64("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::Format(format!("bad rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let n: usize = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0 && n <= (buf.len() - cur.pos) / 8)
            .ok_or_else(|| TensorError::Format(format!("bad extents {shape:?} for `{name}`")))?;
        let raw = cur.take(n * 8, "data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.get(&name).is_some() {
            return Err(TensorError::Format(format!("duplicate record `{name}`")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn read_weights<R: Read>(mut input: R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_weights(store, std::io::BufWriter::new(f))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?)
}
