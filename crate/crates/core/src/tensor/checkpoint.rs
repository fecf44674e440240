//! Flat binary parameter checkpoints.
//!
//! Layout: the magic `KNT1`, then for each parameter until end of file:
//! name length (u64), name (utf-8), rank (u64), each dim (u64), then the
//! float64 payload. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{invalid, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KNT1";

pub fn write_checkpoint<'a, W: Write>(
    w: &mut W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(invalid("checkpoint: bad magic"));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| invalid("checkpoint: parameter name is not utf-8"))?
            .to_string();
        let rank = cur.u64()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| cur.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| invalid("checkpoint: truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes every parameter of `stores`, in store order.
pub fn save_checkpoint(path: &Path, stores: &[&ParamStore]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(
        &mut w,
        stores
            .iter()
            .flat_map(|s| s.iter())
            .map(|p| (p.name(), p.value())),
    )?;
    w.flush()?;
    Ok(())
}

/// Loads values by name into `stores`. Every stored parameter must be present
/// in the file with a matching shape; extra file entries are an error too.
pub fn load_checkpoint(path: &Path, stores: &mut [&mut ParamStore]) -> Result<()> {
    let entries = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
    let expected: usize = stores.iter().map(|s| s.len()).sum();
    if entries.len() != expected {
        return Err(invalid(format!(
            "checkpoint holds {} parameters, model has {expected}",
            entries.len()
        )));
    }
    for (name, t) in entries {
        let p = stores
            .iter_mut()
            .find_map(|s| s.by_name_mut(&name))
            .ok_or_else(|| invalid(format!("checkpoint parameter {name} not in model")))?;
        if p.value().shape() != t.shape() {
            return Err(invalid(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                t.shape(),
                p.value().shape()
            )));
        }
        p.set_value(t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("ab", &t)]).unwrap();
        let mut want = b"KNT1".to_vec();
        want.extend(2u64.to_le_bytes());
        want.extend(b"ab");
        want.extend(2u64.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        want.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, want);
        let back = read_checkpoint(&mut &buf[..]).unwrap();
        assert_eq!(back, vec![("ab".to_string(), t)]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&mut &b"KNT2"[..]).is_err());
        let t = Tensor::vector(vec![1.0]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("x", &t)]).unwrap();
        buf.pop();
        assert!(read_checkpoint(&mut &buf[..]).is_err());
    }
}
