//! Procedural shape dataset used for desk-scale experiments.
//!
//! Every class is closed under horizontal mirroring, so flipped images stay
//! in-distribution.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::{stream, Rng};

pub const CLASS_NAMES: [&str; 10] = [
    "circle", "square", "triangle", "plus", "h_stripes", "v_stripes", "ring", "diagonal", "checker", "l_shape",
];

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: Image,
    pub label: u16,
}

/// `n` images of `size x size`, labels cycling through the classes. Image
/// `i` depends only on `(seed, i)`.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<ToySample>> {
    if size < 16 {
        return Err(invalid(format!("toy images need size >= 16, got {size}")));
    }
    Ok((0..n)
        .map(|i| {
            let label = (i % CLASS_NAMES.len()) as u16;
            let mut rng = stream(seed, i as u64);
            ToySample {
                image: draw(label, size, &mut rng),
                label,
            }
        })
        .collect())
}

fn color(rng: &mut Rng) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(0.0f32..255.0))
}

fn distinct_colors(rng: &mut Rng) -> ([f32; 3], [f32; 3]) {
    loop {
        let (a, b) = (color(rng), color(rng));
        let dist: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
        if dist > 120.0 {
            return (a, b);
        }
    }
}

fn draw(label: u16, size: usize, rng: &mut Rng) -> Image {
    let s = size as f32;
    let (bg, fg) = distinct_colors(rng);
    let r = rng.random_range(0.18 * s..0.34 * s);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let period = rng.random_range(0.09 * s..0.16 * s);
    let thick = rng.random_range(0.08 * s..0.14 * s);
    let mirror = rng.random_bool(0.5);
    let noise = Normal::new(0.0f32, 6.0).unwrap();
    let mut img = Image::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let py = y as f32 + 0.5 - cy;
            let mut px = x as f32 + 0.5 - cx;
            if mirror {
                px = -px;
            }
            let inside = match label {
                0 => px * px + py * py <= r * r,
                1 => px.abs() <= r * 0.85 && py.abs() <= r * 0.85,
                2 => py <= r && py >= -r && px.abs() <= (py + r) * 0.5,
                3 => (px.abs() <= thick * 0.5 && py.abs() <= r) || (py.abs() <= thick * 0.5 && px.abs() <= r),
                4 => px.abs() <= r && py.abs() <= r && ((py + r) / period).floor() as i32 % 2 == 0,
                5 => px.abs() <= r && py.abs() <= r && ((px + r) / period).floor() as i32 % 2 == 0,
                6 => {
                    let d = (px * px + py * py).sqrt();
                    d <= r && d >= r - thick
                }
                7 => px.abs() <= r && py.abs() <= r && (px - py).abs() <= thick * 0.7,
                8 => {
                    px.abs() <= r
                        && py.abs() <= r
                        && (((px + r) / period).floor() as i32 + ((py + r) / period).floor() as i32) % 2 == 0
                }
                _ => {
                    px.abs() <= r && py.abs() <= r && (px <= -r + thick || py >= r - thick)
                }
            };
            let base = if inside { fg } else { bg };
            for (c, v) in base.iter().enumerate() {
                img.set(y, x, c, (v + noise.sample(rng)).clamp(0.0, 255.0));
            }
        }
    }
    img
}
