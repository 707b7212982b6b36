//! Quantized 8x8 block DCT of image luma, the JPEG-style alternative to
//! learned tokens.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::grid::EmbeddingGrid;
use crate::error::{invalid, shape, Result};
use crate::image::Image;

/// JPEG Annex K luminance quantization table, row-major.
pub const LUMA_QUANT_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Scales the base table by an IJG-style quality factor in 1..=100.
pub fn scaled_table(quality: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(invalid(format!("quality {quality} outside 1..=100")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0u16; 64];
    for (o, &b) in t.iter_mut().zip(&LUMA_QUANT_TABLE) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(t)
}

fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        c
    })
}

/// Orthonormal 2-D DCT-II of an 8x8 block (row-major).
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|x| c[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| c[v][y] * tmp[u * 8 + y]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let c = basis();
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for y in 0..8 {
            tmp[u * 8 + y] = (0..8).map(|v| c[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| c[u][x] * tmp[u * 8 + y]).sum();
        }
    }
    out
}

/// Quantized DCT coefficients, one 64-vector per 8x8 luma block.
#[derive(Debug, Clone, PartialEq)]
pub struct DctGrid {
    pub bh: usize,
    pub bw: usize,
    pub table: [u16; 64],
    pub coefficients: Vec<i32>,
}

impl DctGrid {
    pub fn block(&self, by: usize, bx: usize) -> &[i32] {
        let i = (by * self.bw + bx) * 64;
        &self.coefficients[i..i + 64]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.coefficients
            .chunks_exact(64)
            .flat_map(|b| b.iter().zip(&self.table).map(|(c, q)| *c as f64 * *q as f64))
            .collect()
    }

    /// Re-quantizes dequantized coefficients; a fixed point of the codec.
    pub fn requantize(&self) -> DctGrid {
        let deq = self.dequantize();
        let coefficients = deq
            .chunks_exact(64)
            .flat_map(|b| quantize_block(b, &self.table))
            .collect();
        DctGrid {
            coefficients,
            ..self.clone()
        }
    }

    /// Quantized coefficients as a `bh x bw x 64` feature grid.
    pub fn to_embedding(&self) -> EmbeddingGrid {
        EmbeddingGrid {
            h: self.bh,
            w: self.bw,
            d: 64,
            values: self.coefficients.iter().map(|&c| c as f32).collect(),
        }
    }
}

fn quantize_block(coef: &[f64], table: &[u16; 64]) -> Vec<i32> {
    coef.iter()
        .zip(table)
        .map(|(c, q)| (c / *q as f64).round() as i32)
        .collect()
}

fn luma(image: &Image, y: usize, x: usize) -> f64 {
    match image.channels {
        1 => image.get(y, x, 0) as f64,
        _ => {
            0.299 * image.get(y, x, 0) as f64
                + 0.587 * image.get(y, x, 1) as f64
                + 0.114 * image.get(y, x, 2) as f64
        }
    }
}

pub fn dct_tokenize(image: &Image, quality: u8) -> Result<DctGrid> {
    if image.height % 8 != 0 || image.width % 8 != 0 {
        return Err(shape(format!(
            "image {}x{} is not a multiple of 8",
            image.height, image.width
        )));
    }
    if image.channels != 1 && image.channels != 3 {
        return Err(shape("DCT input must be gray or RGB"));
    }
    let table = scaled_table(quality)?;
    let (bh, bw) = (image.height / 8, image.width / 8);
    let mut coefficients = Vec::with_capacity(bh * bw * 64);
    for by in 0..bh {
        for bx in 0..bw {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = luma(image, by * 8 + y, bx * 8 + x);
                }
            }
            coefficients.extend(quantize_block(&dct8x8(&block), &table));
        }
    }
    Ok(DctGrid {
        bh,
        bw,
        table,
        coefficients,
    })
}

/// Dequantizes and inverts back to a single-channel luma image.
pub fn dct_decode(grid: &DctGrid) -> Result<Image> {
    let deq = grid.dequantize();
    let mut img = Image::zeros(grid.bh * 8, grid.bw * 8, 1);
    for by in 0..grid.bh {
        for bx in 0..grid.bw {
            let i = (by * grid.bw + bx) * 64;
            let coef: [f64; 64] = deq[i..i + 64].try_into().unwrap();
            let px = idct8x8(&coef);
            for y in 0..8 {
                for x in 0..8 {
                    img.set(by * 8 + y, bx * 8 + x, 0, px[y * 8 + x] as f32);
                }
            }
        }
    }
    img.clamp_pixels();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_block_only_dc() {
        for c in [0.0f32, 17.0, 100.0, 255.0] {
            let img = Image::filled(8, 8, 1, &[c]);
            let g = dct_tokenize(&img, 50).unwrap();
            let q00 = g.table[0] as f64;
            assert_eq!(g.coefficients[0], (8.0 * c as f64 / q00).round() as i32);
            assert!(g.coefficients[1..].iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn zero_image() {
        let g = dct_tokenize(&Image::zeros(16, 24, 3), 75).unwrap();
        assert_eq!((g.bh, g.bw), (2, 3));
        assert!(g.coefficients.iter().all(|&v| v == 0));
    }

    #[test]
    fn orthonormal_round_trip() {
        let mut rng = crate::rng::seeded(9);
        for _ in 0..20 {
            let mut b = [0.0; 64];
            for v in &mut b {
                *v = rng.random_range(-128.0..255.0);
            }
            let back = idct8x8(&dct8x8(&b));
            for (x, y) in b.iter().zip(&back) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut rng = crate::rng::seeded(2);
        let data = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..255.0)).collect();
        let img = Image::new(16, 16, 3, data).unwrap();
        let g = dct_tokenize(&img, 60).unwrap();
        assert_eq!(g.requantize(), g);
        let dec = dct_decode(&g).unwrap();
        assert_eq!((dec.height, dec.width, dec.channels), (16, 16, 1));
    }

    #[test]
    fn rejects_bad_dims_and_quality() {
        assert!(dct_tokenize(&Image::zeros(12, 16, 3), 50).is_err());
        assert!(dct_tokenize(&Image::zeros(8, 8, 3), 0).is_err());
        assert_eq!(scaled_table(50).unwrap(), LUMA_QUANT_TABLE);
    }
}
