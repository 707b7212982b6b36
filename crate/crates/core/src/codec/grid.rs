use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// An `h x w` grid of codebook indices: the stored form of one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
    pub label: Option<u16>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(invalid("token grid dimensions must be positive"));
        }
        if indices.len() != h * w {
            return Err(shape(format!(
                "token grid of {h}x{w} needs {} indices, got {}",
                h * w,
                indices.len()
            )));
        }
        Ok(Self {
            h,
            w,
            indices,
            label: None,
        })
    }

    pub fn with_label(mut self, label: u16) -> Self {
        self.label = Some(label);
        self
    }

    pub fn from_rows(rows: &[&[u32]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(shape("ragged token rows"));
        }
        Self::new(h, w, rows.concat())
    }

    /// Sequence length `n = h * w`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.indices[y * self.w + x]
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&t| t as usize >= k) {
            Some(&index) => Err(Error::IndexOutOfRange { index, k }),
            None => Ok(()),
        }
    }

    /// Mirrors the grid left to right, without touching the tokens themselves.
    pub fn hflip(&self) -> TokenGrid {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.indices[y * self.w + x] = self.get(y, self.w - 1 - x);
            }
        }
        out
    }

    /// Fraction of positions where two same-shaped grids agree.
    pub fn agreement(&self, other: &TokenGrid) -> Result<f64> {
        if self.h != other.h || self.w != other.w {
            return Err(shape("agreement needs equal grid shapes"));
        }
        let same = self
            .indices
            .iter()
            .zip(&other.indices)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.len() as f64)
    }
}

/// An `h x w x d` grid of real features: looked-up token embeddings or
/// features of an augmentation-compatible space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<f32>,
}

impl EmbeddingGrid {
    pub fn new(h: usize, w: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(invalid("embedding grid dimensions must be positive"));
        }
        if values.len() != h * w * d {
            return Err(shape(format!(
                "embedding grid {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        Ok(Self { h, w, d, values })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            values: vec![0.0; h * w * d],
        }
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn cell(&self, pos: usize) -> &[f32] {
        &self.values[pos * self.d..(pos + 1) * self.d]
    }

    #[inline]
    pub fn cell_mut(&mut self, pos: usize) -> &mut [f32] {
        &mut self.values[pos * self.d..(pos + 1) * self.d]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &EmbeddingGrid) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }
}
