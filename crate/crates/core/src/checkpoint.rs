//! Binary tensor container used for checkpoints and prepared datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CTXCONV\0"
//! version  1 byte   currently 1
//! records  repeated until EOF:
//!     name_len  u32
//!     name      name_len bytes (UTF-8)
//!     rank      u32
//!     extents   rank x u64
//!     payload   product(extents) x f64
//! ```
//!
//! Round trips are bit-exact: payloads are raw IEEE-754 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CTXCONV\0";
pub const VERSION: u8 = 1;

pub fn save_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION])?;
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:02x?}",
            path.display(),
            magic
        )));
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, "version")?;
    if version[0] != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {}",
            path.display(),
            version[0]
        )));
    }

    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read(&mut len4)? {
            0 => break, // clean EOF between records
            4 => {}
            n => {
                let m = r.read(&mut len4[n..])?;
                if n + m < 4 {
                    return Err(Error::Format("truncated record header".into()));
                }
            }
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;

        let mut rank4 = [0u8; 4];
        read_exact(&mut r, &mut rank4, "rank")?;
        let rank = u32::from_le_bytes(rank4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e8 = [0u8; 8];
            read_exact(&mut r, &mut e8, "extent")?;
            let e = u64::from_le_bytes(e8);
            if e == 0 {
                return Err(Error::Format(format!("tensor '{name}' has a zero extent")));
            }
            shape.push(e as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf, "payload")?;
            data.push(f64::from_le_bytes(buf));
        }
        let t = Tensor::from_vec(&shape, data)?;
        if !t.all_finite() {
            return Err(Error::Format(format!(
                "tensor '{name}' contains non-finite values"
            )));
        }
        out.push((name, t));
    }
    Ok(out)
}

/// Single-tensor convenience wrappers (record name "tensor").
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    save_tensors(path, &[("tensor", t)])
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut entries = load_tensors(path)?;
    match entries.len() {
        1 => Ok(entries.pop().unwrap().1),
        n => Err(Error::Format(format!("expected 1 tensor record, found {n}"))),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ck");
        let mut rng = Rng::seed(3);
        let t = rng.uniform_tensor(&[3, 5], -2.0, 2.0).unwrap();
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn roundtrip_many_random_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::seed(11);
        for i in 0..100 {
            let rank = 1 + rng.below(4);
            let shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(6)).collect();
            let t = rng.uniform_tensor(&shape, -1e6, 1e6).unwrap();
            let path = dir.path().join(format!("t{i}.ck"));
            save_tensors(&path, &[("a", &t), ("b", &t)]).unwrap();
            let back = load_tensors(&path).unwrap();
            assert_eq!(back.len(), 2);
            assert_eq!(back[0].1, t);
            assert_eq!(back[1].1, t);
            assert_eq!(back[0].0, "a");
        }
    }

    #[test]
    fn truncated_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ck");
        let t = Tensor::filled(&[4, 4], 1.5).unwrap();
        save_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ck");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"NOTMAGIC\x01").unwrap();
        drop(f);
        assert!(matches!(load_tensor(&path), Err(Error::Format(_))));
    }
}
