//! Fixed-width bit-packed token files.
//!
//! Layout (little-endian): magic `STOK`, version `u8`, `K: u32`, `h: u16`,
//! `w: u16`, `count: u64`, then every index of every grid in row-major order,
//! each written in exactly `ceil(log2 K)` bits, LSB-first within bytes. The
//! final byte is zero-padded.

use std::io::Write;

use super::codebook::bits_for;
use super::grid::TokenGrid;
use crate::error::{invalid, shape, Error, Result};

pub const TOKEN_MAGIC: &[u8; 4] = b"STOK";
pub const TOKEN_VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackHeader {
    pub k: u32,
    pub h: u16,
    pub w: u16,
    pub count: u64,
}

impl PackHeader {
    pub fn bits_per_token(&self) -> u32 {
        bits_for(self.k as usize)
    }

    pub fn body_bytes(&self) -> u64 {
        body_bytes(self.count, self.h as usize, self.w as usize, self.k as usize)
    }
}

/// `ceil(count * h * w * ceil(log2 K) / 8)`.
pub fn body_bytes(count: u64, h: usize, w: usize, k: usize) -> u64 {
    let bits = count as u128 * (h * w) as u128 * bits_for(k) as u128;
    bits.div_ceil(8) as u64
}

pub fn packed_size(count: u64, h: usize, w: usize, k: usize) -> u64 {
    HEADER_BYTES as u64 + body_bytes(count, h, w, k)
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn with_capacity(bytes: usize) -> Self {
        Self {
            out: Vec::with_capacity(bytes),
            acc: 0,
            filled: 0,
        }
    }

    #[inline]
    fn put(&mut self, value: u32, bits: u32) {
        self.acc |= (value as u64) << self.filled;
        self.filled += bits;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    #[inline]
    fn take(&mut self, bits: u32) -> u32 {
        while self.filled < bits {
            self.acc |= (self.bytes[self.pos] as u64) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let v = (self.acc & ((1u64 << bits) - 1)) as u32;
        self.acc >>= bits;
        self.filled -= bits;
        v
    }
}

pub fn pack_tokens(grids: &[TokenGrid], k: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_tokens(&mut out, grids, k)?;
    Ok(out)
}

pub fn write_tokens<W: Write>(mut w: W, grids: &[TokenGrid], k: usize) -> Result<()> {
    if k < 2 || k > u32::MAX as usize {
        return Err(invalid(format!("codebook size {k} outside [2, 2^32)")));
    }
    let (h, wd) = match grids.first() {
        Some(g) => (g.h, g.w),
        None => (1, 1),
    };
    if h > u16::MAX as usize || wd > u16::MAX as usize {
        return Err(shape("grid side exceeds u16"));
    }
    let bits = bits_for(k);
    let mut body = BitWriter::with_capacity(body_bytes(grids.len() as u64, h, wd, k) as usize);
    for g in grids {
        if g.h != h || g.w != wd {
            return Err(shape(format!(
                "all grids must be {h}x{wd}, found {}x{}",
                g.h, g.w
            )));
        }
        g.check_range(k)?;
        for &t in &g.indices {
            body.put(t, bits);
        }
    }
    w.write_all(TOKEN_MAGIC)?;
    w.write_all(&[TOKEN_VERSION])?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(h as u16).to_le_bytes())?;
    w.write_all(&(wd as u16).to_le_bytes())?;
    w.write_all(&(grids.len() as u64).to_le_bytes())?;
    w.write_all(&body.finish())?;
    Ok(())
}

pub fn read_header(payload: &[u8]) -> Result<PackHeader> {
    if payload.len() < HEADER_BYTES {
        return Err(Error::Truncated {
            what: "token header",
            offset: payload.len(),
            expected: HEADER_BYTES,
            found: payload.len(),
        });
    }
    if &payload[0..4] != TOKEN_MAGIC {
        return Err(Error::Format {
            what: "token file",
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    if payload[4] != TOKEN_VERSION {
        return Err(Error::Format {
            what: "token file",
            offset: 4,
            reason: format!("unsupported version {}", payload[4]),
        });
    }
    let k = u32::from_le_bytes(payload[5..9].try_into().unwrap());
    let h = u16::from_le_bytes(payload[9..11].try_into().unwrap());
    let w = u16::from_le_bytes(payload[11..13].try_into().unwrap());
    let count = u64::from_le_bytes(payload[13..21].try_into().unwrap());
    if k < 2 {
        return Err(Error::Format {
            what: "token file",
            offset: 5,
            reason: format!("codebook size {k} < 2"),
        });
    }
    if h == 0 || w == 0 {
        return Err(Error::Format {
            what: "token file",
            offset: 9,
            reason: "zero grid side".into(),
        });
    }
    Ok(PackHeader { k, h, w, count })
}

/// Decodes a whole token file. Fails without partial output on any
/// malformation, reporting the offending byte offset.
pub fn unpack_tokens(payload: &[u8]) -> Result<(PackHeader, Vec<TokenGrid>)> {
    let header = read_header(payload)?;
    let body = &payload[HEADER_BYTES..];
    let expected = header.body_bytes();
    if (body.len() as u64) < expected {
        return Err(Error::Truncated {
            what: "token payload",
            offset: payload.len(),
            expected: HEADER_BYTES + expected as usize,
            found: payload.len(),
        });
    }
    if body.len() as u64 > expected {
        return Err(Error::Format {
            what: "token file",
            offset: HEADER_BYTES + expected as usize,
            reason: format!("{} trailing bytes", body.len() as u64 - expected),
        });
    }
    let (h, w) = (header.h as usize, header.w as usize);
    let bits = header.bits_per_token();
    let mut reader = BitReader {
        bytes: body,
        pos: 0,
        acc: 0,
        filled: 0,
    };
    let mut grids = Vec::with_capacity(header.count as usize);
    for g in 0..header.count {
        let mut indices = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            let t = reader.take(bits);
            if t >= header.k {
                return Err(Error::Format {
                    what: "token payload",
                    offset: HEADER_BYTES + reader.pos.saturating_sub(1),
                    reason: format!("index {t} >= K={} in grid {g}", header.k),
                });
            }
            indices.push(t);
        }
        grids.push(TokenGrid::new(h, w, indices)?);
    }
    Ok((header, grids))
}

/// Labels live beside the token file as `count` little-endian `u16`s.
pub fn pack_labels(labels: &[u16]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.to_le_bytes()).collect()
}

pub fn unpack_labels(bytes: &[u8], count: usize) -> Result<Vec<u16>> {
    if bytes.len() != count * 2 {
        return Err(Error::Truncated {
            what: "label file",
            offset: bytes.len().min(count * 2),
            expected: count * 2,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}
