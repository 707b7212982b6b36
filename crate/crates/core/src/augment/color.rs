//! Channel-statistic transfer between embedding grids, and embedding noise.

use rand_distr::{Distribution, Normal};

use crate::codec::EmbeddingGrid;
use crate::error::{invalid, shape, Result};
use crate::rng::Rng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel mean and (population) standard deviation over spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn of(z: &EmbeddingGrid) -> Self {
        let n = z.positions() as f64;
        let mut mu = vec![0.0f64; z.d];
        for cell in z.values.chunks_exact(z.d) {
            for (m, v) in mu.iter_mut().zip(cell) {
                *m += *v as f64;
            }
        }
        mu.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; z.d];
        for cell in z.values.chunks_exact(z.d) {
            for ((s, v), m) in var.iter_mut().zip(cell).zip(&mu) {
                let e = *v as f64 - m;
                *s += e * e;
            }
        }
        let sigma = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Self { mu, sigma }
    }
}

/// `sigma(z2) * (z1 - mu(z1)) / (sigma(z1) + eps) + mu(z2)`, channel-wise.
/// The grids may differ spatially but must share the channel dimension.
pub fn color_adapt(z1: &EmbeddingGrid, z2: &EmbeddingGrid, eps: f64) -> Result<EmbeddingGrid> {
    if z1.d != z2.d {
        return Err(shape(format!("color_adapt channel mismatch: {} vs {}", z1.d, z2.d)));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("color_adapt eps must be positive, got {eps}")));
    }
    let s1 = ChannelStats::of(z1);
    let s2 = ChannelStats::of(z2);
    let gain: Vec<f64> = s2.sigma.iter().zip(&s1.sigma).map(|(t, s)| t / (s + eps)).collect();
    let mut out = z1.clone();
    for cell in out.values.chunks_exact_mut(z1.d) {
        for (c, v) in cell.iter_mut().enumerate() {
            *v = (gain[c] * (*v as f64 - s1.mu[c]) + s2.mu[c]) as f32;
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, std^2)` noise. `std = 0` returns the input unchanged.
pub fn emb_noise(z: &EmbeddingGrid, std: f64, rng: &mut Rng) -> Result<EmbeddingGrid> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(invalid(format!("noise std must be non-negative, got {std}")));
    }
    if std == 0.0 {
        return Ok(z.clone());
    }
    let normal = Normal::new(0.0, std).expect("std validated");
    let mut out = z.clone();
    for v in out.values.iter_mut() {
        *v += normal.sample(rng) as f32;
    }
    Ok(out)
}
