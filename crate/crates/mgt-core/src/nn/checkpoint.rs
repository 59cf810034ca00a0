//! Checkpoint format ("MGTC"): magic, version u32, length-prefixed JSON run
//! config, parameter count u32, then per parameter: name (u16 length + UTF-8),
//! rank u8, dims (u32 each), f32 payload.
//!
//! Row vectors (1 x n) are stored rank 1; everything else rank 2.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FORMAT_VERSION;
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

pub const MAGIC_CHECKPOINT: [u8; 4] = *b"MGTC";

pub fn write_checkpoint(path: &Path, config_json: &str, ps: &ParamSet<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    w.write_all(&MAGIC_CHECKPOINT).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    let cfg = config_json.as_bytes();
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(cfg).map_err(io)?;
    w.write_all(&(ps.len() as u32).to_le_bytes()).map_err(io)?;
    for (_, p) in ps.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        let (rows, cols) = p.value.shape();
        if rows == 1 {
            w.write_all(&[1u8]).map_err(io)?;
            w.write_all(&(cols as u32).to_le_bytes()).map_err(io)?;
        } else {
            w.write_all(&[2u8]).map_err(io)?;
            w.write_all(&(rows as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(cols as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// The run-config JSON and the named parameters, in file order.
pub fn read_checkpoint(path: &Path) -> Result<(String, ParamSet<f32>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |msg: String| Error::Corrupt {
        path: path.into(),
        msg,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("missing magic".into()))?;
    if magic != MAGIC_CHECKPOINT {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: MAGIC_CHECKPOINT,
            found: magic,
        });
    }
    let mut u16buf = [0u8; 2];
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| corrupt("missing version".into()))?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            version,
        });
    }
    r.read_exact(&mut u32buf)
        .map_err(|_| corrupt("missing config length".into()))?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)
        .map_err(|_| corrupt("truncated config".into()))?;
    let config_json = String::from_utf8(cfg_bytes)
        .map_err(|_| corrupt("config is not valid UTF-8".into()))?;

    r.read_exact(&mut u32buf)
        .map_err(|_| corrupt("missing parameter count".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut ps = ParamSet::new();
    for i in 0..count {
        r.read_exact(&mut u16buf)
            .map_err(|_| corrupt(format!("param {i}: missing name length")))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| corrupt(format!("param {i}: truncated name")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| corrupt(format!("param {i}: name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| corrupt(format!("param {name:?}: missing rank")))?;
        let (rows, cols) = match rank[0] {
            1 => {
                r.read_exact(&mut u32buf)
                    .map_err(|_| corrupt(format!("param {name:?}: missing dims")))?;
                (1usize, u32::from_le_bytes(u32buf) as usize)
            }
            2 => {
                r.read_exact(&mut u32buf)
                    .map_err(|_| corrupt(format!("param {name:?}: missing dims")))?;
                let rows = u32::from_le_bytes(u32buf) as usize;
                r.read_exact(&mut u32buf)
                    .map_err(|_| corrupt(format!("param {name:?}: missing dims")))?;
                (rows, u32::from_le_bytes(u32buf) as usize)
            }
            other => {
                return Err(corrupt(format!(
                    "param {name:?}: unsupported rank {other}"
                )))
            }
        };
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload)
            .map_err(|_| corrupt(format!("param {name:?}: truncated payload")))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ps.add(name, Tensor::new(rows, cols, data));
    }
    Ok((config_json, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamId;

    #[test]
    fn round_trip_preserves_names_shapes_bits() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("enc.w", Tensor::new(2, 3, vec![1.0, 2.5, -3.0, 0.125, 9.0, -0.5]));
        ps.add("enc.b", Tensor::new(1, 3, vec![0.1, 0.2, 0.3]));
        let f = tempfile::NamedTempFile::new().unwrap();
        write_checkpoint(f.path(), r#"{"hidden_size":3}"#, &ps).unwrap();
        let (cfg, back) = read_checkpoint(f.path()).unwrap();
        assert_eq!(cfg, r#"{"hidden_size":3}"#);
        assert_eq!(back.len(), 2);
        let w = back.get(back.id_by_name("enc.w").unwrap());
        assert_eq!(w.value.shape(), (2, 3));
        for (a, b) in w.value.data().iter().zip(ps.get(ParamId(0)).value.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let b = back.get(back.id_by_name("enc.b").unwrap());
        assert_eq!(b.value.shape(), (1, 3));
    }

    #[test]
    fn wrong_magic_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), b"NOPE....").unwrap();
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::new(4, 4, vec![1.0; 16]));
        let f = tempfile::NamedTempFile::new().unwrap();
        write_checkpoint(f.path(), "{}", &ps).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        std::fs::write(f.path(), &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            read_checkpoint(f.path()),
            Err(Error::Corrupt { .. })
        ));
    }
}
