//! Versioned binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "SPNDCKPT"
//! version  u32      FORMAT_VERSION
//! config   u32 length + UTF-8 JSON echo of the model configuration
//! count    u32      number of tensors
//! tensor*  u32 name length, name bytes, u64 value count, f32 values
//! ```
//!
//! Tensors cover every weight and normalization running statistic, named as
//! `<network>.block<i>.unit<j>.<field>` or `head.theta` / `head.bias`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"SPNDCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub struct RawCheckpoint {
    pub config_json: String,
    pub tensors: Vec<(String, Vec<f32>)>,
}

pub fn write_checkpoint<W: Write, T: Real>(
    w: &mut W,
    config_json: &str,
    tensors: &[(String, &[T])],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(config_json.len() as u32)?;
    w.write_all(config_json.as_bytes())?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, values) in tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(values.len() as u64)?;
        for v in values.iter() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<RawCheckpoint> {
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let read_string = |r: &mut R, len: usize| -> Result<String> {
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    };
    let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let config_json = read_string(r, len)?;
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let name = read_string(r, len)?;
        let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut values = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut values).map_err(io)?;
        tensors.push((name, values));
    }
    Ok(RawCheckpoint {
        config_json,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_and_magic_check() {
        let a = [1.0f32, -2.5, 3.25];
        let b = [0.5f32];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"k\":1}", &[("a".into(), &a[..]), ("b".into(), &b[..])]).unwrap();
        let raw = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(raw.config_json, "{\"k\":1}");
        assert_eq!(raw.tensors[0], ("a".to_string(), a.to_vec()));
        assert_eq!(raw.tensors[1], ("b".to_string(), b.to_vec()));
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
