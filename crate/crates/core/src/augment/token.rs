//! Token-level baseline augmentations: one-hot grids, token random-resized
//! crop, token CutMix and the EDA-lite neighbor swap.

use rand::Rng as _;

use super::pixel::{beta, check_scale, sample_box};
use super::spatial::{Interp, Padding, Taps, Warp};
use crate::codec::{Codebook, EmbeddingGrid, TokenGrid};
use crate::error::{invalid, shape, Result};
use crate::rng::Rng;

/// Dense `h x w x k` one-hot (or soft) token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotGrid {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub values: Vec<f32>,
}

impl OneHotGrid {
    pub fn from_tokens(grid: &TokenGrid, k: usize) -> Result<Self> {
        grid.check_range(k)?;
        let mut values = vec![0.0f32; grid.len() * k];
        for (p, &t) in grid.indices.iter().enumerate() {
            values[p * k + t as usize] = 1.0;
        }
        Ok(Self {
            h: grid.h,
            w: grid.w,
            k,
            values,
        })
    }

    /// True when every position holds exactly one 1 and zeros elsewhere.
    pub fn is_one_hot(&self) -> bool {
        self.values.chunks_exact(self.k).all(|row| {
            row.iter().filter(|v| **v == 1.0).count() == 1 && row.iter().all(|v| *v == 0.0 || *v == 1.0)
        })
    }

    /// Per-position argmax (lowest index on ties).
    pub fn argmax(&self) -> TokenGrid {
        let indices = self
            .values
            .chunks_exact(self.k)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect();
        TokenGrid::new(self.h, self.w, indices).expect("shape preserved")
    }

    /// Codebook matrix product `onehot x Z`, skipping zero entries.
    pub fn embed(&self, codebook: &Codebook) -> Result<EmbeddingGrid> {
        if codebook.k() != self.k {
            return Err(shape(format!("one-hot width {} vs codebook K {}", self.k, codebook.k())));
        }
        let d = codebook.d();
        let mut out = EmbeddingGrid::zeros(self.h, self.w, d);
        for (p, row) in self.values.chunks_exact(self.k).enumerate() {
            let cell = out.cell_mut(p);
            for (i, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    for (o, z) in cell.iter_mut().zip(codebook.row(i)) {
                        *o += a * z;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Grids that random-resized-crop can act on.
pub trait Resample: Sized {
    fn dims(&self) -> (usize, usize);
    fn resample(&self, warp: &Warp) -> Self;
}

impl Resample for OneHotGrid {
    fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn resample(&self, warp: &Warp) -> Self {
        let taps = Taps::build(warp, self.h, self.w, Interp::Nearest, Padding::Border);
        Self {
            values: taps.apply(&self.values, self.k),
            ..*self
        }
    }
}

impl Resample for EmbeddingGrid {
    fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn resample(&self, warp: &Warp) -> Self {
        let taps = Taps::build(warp, self.h, self.w, Interp::Bilinear, Padding::Border);
        EmbeddingGrid {
            values: taps.apply(&self.values, self.d),
            ..*self
        }
    }
}

impl Resample for TokenGrid {
    fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn resample(&self, warp: &Warp) -> Self {
        let taps = Taps::build(warp, self.h, self.w, Interp::Nearest, Padding::Border);
        let indices = taps.taps.iter().map(|t| self.indices[t[0].0]).collect();
        TokenGrid {
            indices,
            ..self.clone()
        }
    }
}

/// Integer sub-grid `(top, left, height, width)` covering an area fraction
/// drawn from `scale` with log-uniform aspect in `[3/4, 4/3]`. Falls back to
/// the full grid when ten draws do not fit; never smaller than 1x1.
pub fn sample_grid_crop(h: usize, w: usize, scale: (f64, f64), rng: &mut Rng) -> (usize, usize, usize, usize) {
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let area = (h * w) as f64;
    for _ in 0..10 {
        let s = if scale.1 > scale.0 { rng.random_range(scale.0..scale.1) } else { scale.0 };
        let r = rng.random_range(lr0..lr1).exp();
        let ch = ((s * area / r).sqrt().round() as usize).max(1);
        let cw = ((s * area * r).sqrt().round() as usize).max(1);
        if ch <= h && cw <= w {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

pub fn crop_warp(h: usize, w: usize, crop: (usize, usize, usize, usize)) -> Warp {
    if crop == (0, 0, h, w) {
        return Warp::Identity;
    }
    Warp::Crop {
        top: crop.0 as f64 / h as f64,
        left: crop.1 as f64 / w as f64,
        height: crop.2 as f64 / h as f64,
        width: crop.3 as f64 / w as f64,
    }
}

/// Crops a random sub-grid and resizes it back: nearest for one-hot and
/// token grids, bilinear for embeddings.
pub fn token_rrc<G: Resample>(x: &G, scale: (f64, f64), rng: &mut Rng) -> Result<G> {
    check_scale(scale)?;
    let (h, w) = x.dims();
    let crop = sample_grid_crop(h, w, scale, rng);
    Ok(x.resample(&crop_warp(h, w, crop)))
}

/// Pastes `zb` into `za` over the cell box `(top, left, height, width)`.
/// Returns the mixed grid and the retained fraction of `za`.
pub fn cutmix_with_box(
    za: &EmbeddingGrid,
    zb: &EmbeddingGrid,
    bx: (usize, usize, usize, usize),
) -> Result<(EmbeddingGrid, f64)> {
    if !za.same_shape(zb) {
        return Err(shape("token_cutmix inputs must share shape"));
    }
    let (top, left, bh, bw) = bx;
    if top + bh > za.h || left + bw > za.w {
        return Err(invalid("cutmix box exceeds grid"));
    }
    let mut out = za.clone();
    for y in top..top + bh {
        let s = (y * za.w + left) * za.d;
        let e = (y * za.w + left + bw) * za.d;
        out.values[s..e].copy_from_slice(&zb.values[s..e]);
    }
    let lambda = 1.0 - (bh * bw) as f64 / za.positions() as f64;
    Ok((out, lambda))
}

/// CutMix on embedding grids with `lambda ~ Beta(alpha, alpha)` and a
/// uniformly centered box. Labels are class-probability vectors.
pub fn token_cutmix(
    za: &EmbeddingGrid,
    ya: &[f32],
    zb: &EmbeddingGrid,
    yb: &[f32],
    alpha: f64,
    rng: &mut Rng,
) -> Result<(EmbeddingGrid, Vec<f32>, f64)> {
    if !za.same_shape(zb) {
        return Err(shape("token_cutmix inputs must share shape"));
    }
    if ya.len() != yb.len() {
        return Err(shape("token_cutmix label vectors differ in length"));
    }
    if !(alpha > 0.0) {
        return Err(invalid("cutmix alpha must be positive"));
    }
    let lambda = beta(rng, alpha);
    let bx = sample_box(lambda, za.h, za.w, rng);
    let (out, actual) = cutmix_with_box(za, zb, bx)?;
    Ok((out, mix_labels(ya, yb, actual), actual))
}

pub fn mix_labels(ya: &[f32], yb: &[f32], lambda: f64) -> Vec<f32> {
    ya.iter()
        .zip(yb)
        .map(|(a, b)| (lambda * *a as f64 + (1.0 - lambda) * *b as f64) as f32)
        .collect()
}

/// EDA-lite: each position, with probability `p`, swaps with a uniformly
/// chosen 4-neighbor. Preserves the token multiset.
pub fn token_eda_swap(grid: &TokenGrid, p: f64, rng: &mut Rng) -> Result<TokenGrid> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("swap probability {p} outside [0, 1]")));
    }
    let mut out = grid.clone();
    if p == 0.0 || grid.len() == 1 {
        return Ok(out);
    }
    let (h, w) = (grid.h, grid.w);
    let mut nbrs = Vec::with_capacity(4);
    for y in 0..h {
        for x in 0..w {
            if !rng.random_bool(p) {
                continue;
            }
            nbrs.clear();
            if y > 0 {
                nbrs.push((y - 1) * w + x);
            }
            if y + 1 < h {
                nbrs.push((y + 1) * w + x);
            }
            if x > 0 {
                nbrs.push(y * w + x - 1);
            }
            if x + 1 < w {
                nbrs.push(y * w + x + 1);
            }
            let j = nbrs[rng.random_range(0..nbrs.len())];
            out.indices.swap(y * w + x, j);
        }
    }
    Ok(out)
}
