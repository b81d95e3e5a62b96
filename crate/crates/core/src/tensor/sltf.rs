//! `SLTF` binary tensor files.
//!
//! Layout (all little-endian): magic `SLTF`, u32 version (1), u32 ndim,
//! ndim x u64 extents, then the f64 payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::{DenseTensor, Shape};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLTF";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.dims().len() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad SLTF magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let ndim = read_u32(r, "ndim")? as usize;
    if ndim == 0 || ndim > 64 {
        return Err(Error::Format(format!("implausible SLTF ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "extent")?;
        let d = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Format("extent does not fit in memory".into()))?;
        dims.push(d);
    }
    let shape = Shape::new(dims).map_err(|e| Error::Format(e.to_string()))?;
    let n = shape.element_count();
    let mut raw = vec![
        0u8;
        n.checked_mul(8)
            .ok_or_else(|| Error::Format("payload too large".into()))?
    ];
    read_exact(r, &mut raw, "payload")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    DenseTensor::new(shape, data)
}

pub fn save(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * t.len());
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after SLTF payload",
            cursor.len()
        )));
    }
    Ok(t)
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated file while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = DenseTensor::from_dims(&[1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"SLTF");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1u64.to_le_bytes());
        assert_eq!(&buf[20..28], &2u64.to_le_bytes());
        assert_eq!(&buf[28..36], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 44);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let t = DenseTensor::vector(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let short = &buf[..buf.len() - 3];
        assert!(matches!(
            read_tensor(&mut &short[..]),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_tensor(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut newer = buf;
        newer[4] = 2;
        assert!(matches!(
            read_tensor(&mut newer.as_slice()),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }
}
