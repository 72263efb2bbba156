//! Direction vector files: 16-byte header (magic "DVEC", u32 version=1,
//! u64 dimension) followed by raw little-endian f64 components.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DVEC";
const VERSION: u32 = 1;

pub fn write_direction(v: &[f64], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_direction(path: &Path) -> Result<Vec<f64>> {
    let bad = |reason: &str| Error::BadDirectionFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    if u32::from_le_bytes(vb) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut db = [0u8; 8];
    r.read_exact(&mut db)?;
    let dim = u64::from_le_bytes(db) as usize;
    let mut buf = vec![0u8; dim * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vec");
        let v = vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE];
        write_direction(&v, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 32);
        assert_eq!(read_direction(&p).unwrap(), v);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vec");
        std::fs::write(&p, b"NOPE0000000000000000").unwrap();
        assert!(read_direction(&p).is_err());
    }
}
