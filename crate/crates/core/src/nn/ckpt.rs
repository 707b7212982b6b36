//! Binary checkpoint container shared by all trained modules:
//! magic, version, JSON config block, codebook id, a manifest of named
//! parameter shapes, then the little-endian f32 payload in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::NamedTensor;
use crate::error::{Error, Result};

pub const CKPT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub config: serde_json::Value,
    pub codebook_id: String,
    pub params: Vec<NamedTensor>,
}

fn fmt_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        offset,
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                what: "checkpoint",
                offset: self.pos,
                expected: n,
                found: self.buf.len() - self.pos,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.push(CKPT_VERSION);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| crate::error::invalid(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.codebook_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.codebook_id.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.shape.len() as u8);
            for d in &p.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for p in &self.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], magic: &[u8; 4]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4)? != magic {
            return Err(fmt_err(0, format!("expected magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = c.u8()?;
        if version != CKPT_VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}")));
        }
        let n = c.u32()? as usize;
        let at = c.pos;
        let config = serde_json::from_slice(c.take(n)?).map_err(|e| fmt_err(at, format!("config block: {e}")))?;
        let n = c.u32()? as usize;
        let at = c.pos;
        let codebook_id = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| fmt_err(at, "codebook id not utf-8"))?;
        let count = c.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = c.u32()? as usize;
            let at = c.pos;
            let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| fmt_err(at, "parameter name not utf-8"))?;
            let rank = c.u8()? as usize;
            let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut params = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let bytes = c.take(n * 4)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            params.push(NamedTensor { name, shape, data });
        }
        if c.pos != buf.len() {
            return Err(fmt_err(c.pos, format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Self {
            magic: *magic,
            config,
            codebook_id,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, magic)
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| fmt_err(9, format!("config block: {e}")))
    }
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            magic: *b"TEST",
            config: serde_json::json!({"depth": 2, "name": "x"}),
            codebook_id: "abcd".into(),
            params: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0],
                },
                NamedTensor {
                    name: "a.bias".into(),
                    shape: vec![3],
                    data: vec![0.1, 0.2, 0.3],
                },
            ],
        }
    }

    #[test]
    fn roundtrip_and_errors() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, b"TEST").unwrap(), c);
        assert!(Checkpoint::from_bytes(&bytes, b"SMOD").is_err());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], b"TEST"),
            Err(Error::Truncated { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, b"TEST").is_err());
    }

    #[test]
    fn atomic_save() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        sample().save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p, b"TEST").unwrap(), sample());
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
