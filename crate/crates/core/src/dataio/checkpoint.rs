//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "NSSLCKPT"
//! tag_len      u32
//! schema_tag   tag_len bytes of UTF-8, must equal SCHEMA_TAG
//! step         u64
//! config_len   u32
//! config       config_len bytes of UTF-8 (TOML run-config snapshot)
//! blob_count   u32
//! blob_count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   len        u64
//!   values     len x f64 (IEEE-754 bit patterns, little-endian)
//! ```
//!
//! Blob names: `encoder` and the optional `decoder` carry the model
//! parameters; every other blob (heads, optimizer moments) lands in `aux`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NSSLCKPT";
pub const SCHEMA_TAG: &str = "nucleus-ssl/checkpoint/v1";

const ENCODER_BLOB: &str = "encoder";
const DECODER_BLOB: &str = "decoder";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder_params: Vec<f64>,
    pub decoder_params: Option<Vec<f64>>,
    pub aux: BTreeMap<String, Vec<f64>>,
    pub config_snapshot: String,
    pub step: u64,
}

impl Checkpoint {
    pub fn aux(&self, name: &str) -> Result<&[f64]> {
        self.aux
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Decode {
                path: Default::default(),
                reason: format!("checkpoint has no '{name}' blob"),
            })
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_blob(w: &mut impl Write, name: &str, values: &[f64]) -> std::io::Result<()> {
    write_str(w, name)?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    write_str(&mut w, SCHEMA_TAG).map_err(io)?;
    w.write_all(&ckpt.step.to_le_bytes()).map_err(io)?;
    write_str(&mut w, &ckpt.config_snapshot).map_err(io)?;
    let count = 1 + ckpt.decoder_params.is_some() as usize + ckpt.aux.len();
    write_u32(&mut w, count as u32).map_err(io)?;
    write_blob(&mut w, ENCODER_BLOB, &ckpt.encoder_params).map_err(io)?;
    if let Some(dec) = &ckpt.decoder_params {
        write_blob(&mut w, DECODER_BLOB, dec).map_err(io)?;
    }
    for (name, values) in &ckpt.aux {
        if name == ENCODER_BLOB || name == DECODER_BLOB {
            return Err(Error::Encode {
                path: path.to_path_buf(),
                reason: format!("aux blob name '{name}' is reserved"),
            });
        }
        write_blob(&mut w, name, values).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    path: &'a Path,
    r: BufReader<File>,
}

impl Cursor<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|e| Error::Decode {
            path: self.path.to_path_buf(),
            reason: format!("truncated checkpoint: {e}"),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Decode {
            path: self.path.to_path_buf(),
            reason: "invalid UTF-8 in checkpoint".into(),
        })
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.bytes(n.checked_mul(8).ok_or_else(|| Error::Decode {
            path: self.path.to_path_buf(),
            reason: "blob length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().unwrap())))
            .collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        path,
        r: BufReader::new(file),
    };
    let magic = c.bytes(MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "not a checkpoint file (bad magic)".into(),
        });
    }
    let tag = c.string()?;
    if tag != SCHEMA_TAG {
        return Err(Error::SchemaMismatch {
            expected: SCHEMA_TAG.to_string(),
            found: tag,
        });
    }
    let step = c.u64()?;
    let config_snapshot = c.string()?;
    let count = c.u32()?;
    let mut encoder_params = None;
    let mut decoder_params = None;
    let mut aux = BTreeMap::new();
    for _ in 0..count {
        let name = c.string()?;
        let values = c.f64s()?;
        match name.as_str() {
            ENCODER_BLOB => encoder_params = Some(values),
            DECODER_BLOB => decoder_params = Some(values),
            _ => {
                aux.insert(name, values);
            }
        }
    }
    let encoder_params = encoder_params.ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        reason: "checkpoint has no encoder blob".into(),
    })?;
    Ok(Checkpoint {
        encoder_params,
        decoder_params,
        aux,
        config_snapshot,
        step,
    })
}
