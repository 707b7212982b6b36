//! Lloyd's k-means over flattened image patches, seeded with k-means++.

use std::collections::HashSet;

use rand::Rng as _;

use super::codebook::{nearest_rows, sq_dist, Codebook};
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iters: 25 }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    pub sse: f64,
    pub iterations: usize,
}

/// Indices of the first occurrence of every distinct row.
pub fn distinct_rows(points: &[f32], d: usize) -> Vec<usize> {
    let mut seen = HashSet::new();
    points
        .chunks_exact(d)
        .enumerate()
        .filter(|(_, row)| seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .map(|(i, _)| i)
        .collect()
}

/// k-means++ seeding over the distinct rows. Points already chosen have zero
/// weight, so the seeds are pairwise distinct.
pub fn init_centroids(points: &[f32], d: usize, k: usize, seed: u64) -> Result<Vec<f32>> {
    let distinct = distinct_rows(points, d);
    if distinct.len() < k {
        return Err(Error::TooFewPatches {
            needed: k,
            found: distinct.len(),
        });
    }
    let mut rng = rng::seeded(seed);
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let first = distinct[rng.random_range(0..distinct.len())];
    let mut centroids = row(first).to_vec();
    let mut min_d: Vec<f64> = distinct.iter().map(|&i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = min_d.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (j, &w) in min_d.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(j);
            if acc > target {
                break;
            }
        }
        let j = pick.expect("distinct rows remain with positive distance");
        let chosen = row(distinct[j]).to_vec();
        for (m, &i) in min_d.iter_mut().zip(&distinct) {
            let dist = sq_dist(row(i), &chosen);
            if dist < *m {
                *m = dist;
            }
        }
        centroids.extend_from_slice(&chosen);
    }
    Ok(centroids)
}

/// Runs Lloyd iterations from `init`. An iteration assigns every point, stops
/// if no assignment changed, and otherwise moves each centroid to the f64 mean
/// of its members (rounded to f32). Empty clusters keep their centroid.
pub fn lloyd(points: &[f32], d: usize, init: Vec<f32>, max_iters: usize) -> Result<KMeansFit> {
    let k = init.len() / d;
    let mut centroids = init;
    let mut assignments: Vec<u32> = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        let next = nearest_rows(points, &centroids, d)?;
        if next == assignments {
            break;
        }
        assignments = next;
        iterations += 1;
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for (row, &a) in points.chunks_exact(d).zip(&assignments) {
            let a = a as usize;
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(row) {
                *s += *v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for i in 0..d {
                centroids[c * d + i] = (sums[c * d + i] / counts[c] as f64) as f32;
            }
        }
    }
    let assignments = nearest_rows(points, &centroids, d)?;
    let sse = points
        .chunks_exact(d)
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a as usize * d..(a as usize + 1) * d]))
        .sum();
    Ok(KMeansFit {
        centroids,
        assignments,
        sse,
        iterations,
    })
}

pub fn fit_kmeans(points: &[f32], d: usize, k: usize, seed: u64, cfg: KMeansConfig) -> Result<KMeansFit> {
    if d == 0 || points.len() % d != 0 {
        return Err(invalid("point buffer is not a whole number of rows"));
    }
    let init = init_centroids(points, d, k, seed)?;
    lloyd(points, d, init, cfg.max_iters)
}

/// Nudges rows that collide with an earlier row until every row is distinct.
pub fn separate_duplicates(centroids: &mut [f32], d: usize) {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for (r, row) in centroids.chunks_exact_mut(d).enumerate() {
        let mut bump = 0u32;
        loop {
            let key: Vec<u32> = row
                .iter()
                .map(|v| if *v == 0.0 { 0 } else { v.to_bits() })
                .collect();
            if seen.insert(key) {
                break;
            }
            bump += 1;
            row[0] += 1e-3 * (r as f32 + 1.0) * bump as f32;
        }
    }
}

pub fn codebook_from_fit(fit: &KMeansFit, d: usize) -> Result<Codebook> {
    let mut c = fit.centroids.clone();
    separate_duplicates(&mut c, d);
    Codebook::new(c, fit.centroids.len() / d, d)
}
