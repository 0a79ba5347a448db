//! Binary container of named `f64` arrays behind a JSON header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      [u8; 8]
//! version    u32
//! header     u32 length + UTF-8 JSON
//! count      u32
//! arrays     count x { u16 name length, name, u8 ndim, ndim x u64 dims, f64 data }
//! ```

use std::io::{Read, Write};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub struct Container {
    pub version: u32,
    pub header: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
        Ok(self.arrays.remove(pos).1)
    }
}

pub fn write_container<W: Write>(
    w: &mut W,
    magic: &[u8; 8],
    version: u32,
    header: &serde_json::Value,
    arrays: &[(&str, &Tensor)],
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    let header = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        let name = name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Format("array name too long".into()))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[t.ndim() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_container<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<Container> {
    let found: [u8; 8] = read_array(r)?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    let header_len = u32::from_le_bytes(read_array(r)?) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = serde_json::from_slice(&header).map_err(|e| Error::Format(e.to_string()))?;
    let count = u32::from_le_bytes(read_array(r)?);
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_array(r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let [ndim] = read_array::<1, _>(r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_array(r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    Ok(Container {
        version,
        header,
        arrays,
    })
}
