//! Gaussian noise and blur corruptions with five severity levels.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::rng::Rng;

/// Noise std per severity, as a fraction of the 0..255 range.
pub const NOISE_STD: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
/// Blur sigma per severity at a 224-pixel reference side; scaled by `H / 224`.
pub const BLUR_SIGMA: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 6.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
        })
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "gaussian_blur" => Ok(CorruptionKind::GaussianBlur),
            other => Err(invalid(format!("unknown corruption `{other}`"))),
        }
    }
}

pub fn blur_sigma(severity: u8, height: usize) -> Result<f64> {
    Ok(BLUR_SIGMA[level(severity)?] * height as f64 / 224.0)
}

fn level(severity: u8) -> Result<usize> {
    if (1..=5).contains(&severity) {
        Ok(severity as usize - 1)
    } else {
        Err(invalid(format!("severity {severity} outside 1..=5")))
    }
}

pub fn corrupt(image: &Image, kind: CorruptionKind, severity: u8, rng: &mut Rng) -> Result<Image> {
    let lvl = level(severity)?;
    let mut out = match kind {
        CorruptionKind::GaussianNoise => {
            let std = NOISE_STD[lvl] * 255.0;
            let mut out = image.clone();
            for v in out.data.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v = (*v as f64 + std * e) as f32;
            }
            out
        }
        CorruptionKind::GaussianBlur => gaussian_blur(image, blur_sigma(severity, image.height)?),
    };
    out.clamp_pixels();
    Ok(out)
}

fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable blur with reflection padding, accumulated in f64.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + j as i64 - r, w as i64);
                    acc += kv * image.data[(y * w + xx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = reflect(y as i64 + j as i64 - r, h as i64);
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out.data[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn textured(seed: u64) -> Image {
        let mut rng = seeded(seed);
        Image::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random_range(40.0..215.0)).collect()).unwrap()
    }

    #[test]
    fn blur_constant_is_identity() {
        let img = Image::filled(16, 16, 3, &[12.0, 100.0, 250.0]);
        for s in 1..=5 {
            assert_eq!(corrupt(&img, CorruptionKind::GaussianBlur, s, &mut seeded(0)).unwrap(), img);
        }
    }

    #[test]
    fn severity_monotone() {
        let img = textured(3);
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::GaussianBlur] {
            let mses: Vec<f64> = (1..=5)
                .map(|s| img.mse(&corrupt(&img, kind, s, &mut seeded(11)).unwrap()))
                .collect();
            assert!(mses.windows(2).all(|p| p[0] <= p[1]), "{kind}: {mses:?}");
        }
    }

    #[test]
    fn noise_seeded_and_bad_severity() {
        let img = textured(4);
        let a = corrupt(&img, CorruptionKind::GaussianNoise, 3, &mut seeded(2)).unwrap();
        let b = corrupt(&img, CorruptionKind::GaussianNoise, 3, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        assert!(corrupt(&img, CorruptionKind::GaussianNoise, 0, &mut seeded(2)).is_err());
        assert!(corrupt(&img, CorruptionKind::GaussianBlur, 6, &mut seeded(2)).is_err());
        assert_eq!("gaussian_blur".parse::<CorruptionKind>().unwrap(), CorruptionKind::GaussianBlur);
        assert!("fog".parse::<CorruptionKind>().is_err());
    }
}
