use std::collections::HashSet;
use std::io::{Read, Write};

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use super::grid::{EmbeddingGrid, TokenGrid};
use crate::error::{invalid, shape, Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"SCBK";
pub const CODEBOOK_VERSION: u8 = 1;

/// The quantizer's `K x d` table of codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<f32>,
    k: usize,
    d: usize,
    id: String,
}

impl Codebook {
    /// Validates and hashes a row-major `k x d` table.
    pub fn new(entries: Vec<f32>, k: usize, d: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("codebook needs K >= 2, got {k}")));
        }
        if d == 0 {
            return Err(invalid("codebook needs d >= 1"));
        }
        if entries.len() != k * d {
            return Err(shape(format!(
                "codebook {k}x{d} needs {} values, got {}",
                k * d,
                entries.len()
            )));
        }
        if let Some(i) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut seen = HashSet::with_capacity(k);
        for (row, chunk) in entries.chunks_exact(d).enumerate() {
            let bits: Vec<u32> = chunk.iter().map(|v| canonical_bits(*v)).collect();
            if !seen.insert(bits) {
                return Err(invalid(format!("codebook row {row} duplicates an earlier row")));
            }
        }
        let id = content_id(&entries, k, d);
        Ok(Self { entries, k, d, id })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f32] {
        &self.entries[k * self.d..(k + 1) * self.d]
    }

    /// Bits needed to store one index: `ceil(log2 K)`.
    pub fn bits_per_token(&self) -> u32 {
        bits_for(self.k)
    }

    pub fn lookup(&self, grid: &TokenGrid) -> Result<EmbeddingGrid> {
        grid.check_range(self.k)?;
        let mut values = Vec::with_capacity(grid.len() * self.d);
        for &t in &grid.indices {
            values.extend_from_slice(self.row(t as usize));
        }
        EmbeddingGrid::new(grid.h, grid.w, self.d, values)
    }

    /// Maps every cell to its nearest codeword (squared L2, ties to the lowest index).
    pub fn quantize(&self, z: &EmbeddingGrid) -> Result<TokenGrid> {
        if z.d != self.d {
            return Err(shape(format!(
                "embedding dim {} does not match codebook dim {}",
                z.d, self.d
            )));
        }
        z.check_finite()?;
        let indices = self.nearest(&z.values)?;
        TokenGrid::new(z.h, z.w, indices)
    }

    /// Nearest codeword index for each row of a row-major `n x d` buffer.
    pub fn nearest(&self, points: &[f32]) -> Result<Vec<u32>> {
        nearest_rows(points, &self.entries, self.d)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&[CODEBOOK_VERSION])?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.entries.len() * 4);
        for v in &self.entries {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 13;
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                what: "codebook header",
                offset: bytes.len(),
                expected: HEADER,
                found: bytes.len(),
            });
        }
        if &bytes[0..4] != CODEBOOK_MAGIC {
            return Err(Error::Format {
                what: "codebook",
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        if bytes[4] != CODEBOOK_VERSION {
            return Err(Error::Format {
                what: "codebook",
                offset: 4,
                reason: format!("unsupported version {}", bytes[4]),
            });
        }
        let k = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let expected = HEADER + k * d * 4;
        if bytes.len() != expected {
            return Err(Error::Truncated {
                what: "codebook payload",
                offset: bytes.len().min(expected),
                expected,
                found: bytes.len(),
            });
        }
        let entries = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(entries, k, d)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn bits_for(k: usize) -> u32 {
    assert!(k >= 2);
    usize::BITS - (k - 1).leading_zeros()
}

fn canonical_bits(v: f32) -> u32 {
    // +0.0 and -0.0 are the same codeword
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

fn content_id(entries: &[f32], k: usize, d: usize) -> String {
    let mut h = Sha256::new();
    h.update((k as u32).to_le_bytes());
    h.update((d as u32).to_le_bytes());
    for v in entries {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[inline]
pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn argmin_exact(p: &[f32], centroids: &[f32], d: usize, candidates: impl Iterator<Item = usize>) -> u32 {
    let mut best = u32::MAX;
    let mut best_d = f64::INFINITY;
    for k in candidates {
        let dist = sq_dist(p, &centroids[k * d..(k + 1) * d]);
        if dist < best_d {
            best_d = dist;
            best = k as u32;
        }
    }
    best
}

const BRUTE_FORCE_WORK: usize = 1 << 21;
const CHUNK_ROWS: usize = 4096;

/// Nearest-centroid search. Large problems are screened with an f32 matrix
/// product; every candidate inside the screening error bound is then rescored
/// exactly in f64, so the answer always equals the exhaustive scan.
pub(crate) fn nearest_rows(points: &[f32], centroids: &[f32], d: usize) -> Result<Vec<u32>> {
    if points.len() % d != 0 {
        return Err(shape(format!("{} values is not a multiple of d={d}", points.len())));
    }
    let n = points.len() / d;
    let k = centroids.len() / d;
    if n * k * d <= BRUTE_FORCE_WORK {
        return Ok(points
            .chunks_exact(d)
            .map(|p| argmin_exact(p, centroids, d, 0..k))
            .collect());
    }

    let dev = Device::Cpu;
    let c = Tensor::from_slice(centroids, (k, d), &dev)?;
    let ct = c.t()?.contiguous()?;
    let c_norm: Vec<f32> = centroids
        .chunks_exact(d)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    let c_norm_max = c_norm.iter().cloned().fold(0.0f32, f32::max);

    let mut out = Vec::with_capacity(n);
    let mut cands = Vec::new();
    for chunk in points.chunks(CHUNK_ROWS * d) {
        let rows = chunk.len() / d;
        let p = Tensor::from_slice(chunk, (rows, d), &dev)?;
        let dots: Vec<f32> = p.matmul(&ct)?.flatten_all()?.to_vec1()?;
        for (r, prow) in chunk.chunks_exact(d).enumerate() {
            let p_norm: f32 = prow.iter().map(|v| v * v).sum();
            let drow = &dots[r * k..(r + 1) * k];
            let approx = |j: usize| p_norm - 2.0 * drow[j] + c_norm[j];
            let min = (0..k).map(approx).fold(f32::INFINITY, f32::min);
            let tol = 1e-4 * (p_norm + c_norm_max) + 1e-6;
            cands.clear();
            cands.extend((0..k).filter(|&j| approx(j) <= min + tol));
            out.push(argmin_exact(prow, centroids, d, cands.iter().copied()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute(points: &[f32], cb: &[f32], d: usize) -> Vec<u32> {
        points
            .chunks_exact(d)
            .map(|p| {
                let mut best = (f64::INFINITY, 0u32);
                for (k, c) in cb.chunks_exact(d).enumerate() {
                    let mut s = 0.0f64;
                    for i in 0..d {
                        let t = p[i] as f64 - c[i] as f64;
                        s += t * t;
                    }
                    if s < best.0 {
                        best = (s, k as u32);
                    }
                }
                best.1
            })
            .collect()
    }

    #[test]
    fn lookup_single_cell() {
        let cb = Codebook::new(vec![0.5, -1.0, 2.0, 3.0], 2, 2).unwrap();
        let z = cb.lookup(&TokenGrid::new(1, 1, vec![0]).unwrap()).unwrap();
        assert_eq!(z.values, vec![0.5, -1.0]);
    }

    #[test]
    fn lookup_identity_permutation() {
        let cb = Codebook::new(vec![0.0, 1.0, 2.0, 3.0], 4, 1).unwrap();
        let g = TokenGrid::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(cb.lookup(&g).unwrap().values, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let cb = Codebook::new(vec![0.0, 1.0], 2, 1).unwrap();
        let g = TokenGrid::new(1, 1, vec![2]).unwrap();
        assert!(matches!(cb.lookup(&g), Err(Error::IndexOutOfRange { index: 2, k: 2 })));
    }

    #[test]
    fn quantize_tie_goes_to_lowest_index() {
        let cb = Codebook::new(vec![-1.0, 1.0], 2, 1).unwrap();
        let z = EmbeddingGrid::new(1, 1, 1, vec![0.0]).unwrap();
        assert_eq!(cb.quantize(&z).unwrap().indices, vec![0]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let cb = Codebook::new(vec![-1.0, 1.0], 2, 1).unwrap();
        let z = EmbeddingGrid::new(1, 2, 1, vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(cb.quantize(&z), Err(Error::NonFinite(1))));
    }

    #[test]
    fn invariants_rejected() {
        assert!(Codebook::new(vec![1.0], 1, 1).is_err());
        assert!(Codebook::new(vec![1.0, 1.0], 2, 1).is_err());
        assert!(Codebook::new(vec![0.0, -0.0], 2, 1).is_err());
        assert!(Codebook::new(vec![1.0, f32::INFINITY], 2, 1).is_err());
        assert!(Codebook::new(vec![1.0, 2.0, 3.0], 2, 1).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_scan_small() {
        let mut rng = crate::rng::seeded(3);
        let d = 5;
        let cb: Vec<f32> = (0..16 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(cb, 16, d).unwrap();
        let pts: Vec<f32> = (0..100 * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        assert_eq!(cb.nearest(&pts).unwrap(), brute(&pts, cb.entries(), d));
    }

    #[test]
    fn screened_path_matches_exhaustive_scan() {
        let mut rng = crate::rng::seeded(11);
        let (k, d, n) = (128, 48, 3000);
        // quantized values make exact ties common
        let cb: Vec<f32> = (0..k * d).map(|_| rng.random_range(0..8) as f32 * 32.0).collect();
        let cb = Codebook::new(cb, k, d).unwrap();
        let mut pts: Vec<f32> = (0..n * d).map(|_| rng.random_range(0..8) as f32 * 32.0).collect();
        pts[..d].copy_from_slice(cb.row(77));
        assert!(n * k * d > BRUTE_FORCE_WORK);
        let got = cb.nearest(&pts).unwrap();
        assert_eq!(got, brute(&pts, cb.entries(), d));
        assert_eq!(got[0], 77);
    }

    #[test]
    fn file_round_trip_and_errors() {
        let cb = Codebook::new(vec![0.25, -1.0, 3.5, 7.0, 1.0, 2.0], 3, 2).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"SCBK");
        assert_eq!(bytes.len(), 13 + 6 * 4);
        let back = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.id(), cb.id());
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Codebook::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bits() {
        assert_eq!(bits_for(2), 1);
        assert_eq!(bits_for(3), 2);
        assert_eq!(bits_for(4), 2);
        assert_eq!(bits_for(5), 3);
        assert_eq!(bits_for(512), 9);
        assert_eq!(bits_for(513), 10);
        assert_eq!(bits_for(65536), 16);
    }
}
