//! Pixel-space augmentation operators. Each operator is first sampled into a
//! concrete [`SampledAug`] so the same draw can be applied to an image and to
//! the feature grid of its tokens.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::spatial::{Interp, Padding, Taps, Warp};
use crate::codec::EmbeddingGrid;
use crate::error::{invalid, shape, Result};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PixelOp {
    Identity,
    Hflip,
    Rrc { scale: (f64, f64), ratio: (f64, f64) },
    Affine { degrees: f64, translate: f64, shear: f64 },
    Mixup { alpha: f64 },
    Cutmix { alpha: f64 },
    Brightness { max_delta: f64 },
    Contrast { low: f64, high: f64 },
}

impl PixelOp {
    pub fn rrc() -> Self {
        PixelOp::Rrc {
            scale: (0.35, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }

    pub fn affine() -> Self {
        PixelOp::Affine {
            degrees: 15.0,
            translate: 0.1,
            shear: 10.0,
        }
    }

    pub fn mixup() -> Self {
        PixelOp::Mixup { alpha: 0.8 }
    }

    pub fn cutmix() -> Self {
        PixelOp::Cutmix { alpha: 1.0 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PixelOp::Identity => "identity",
            PixelOp::Hflip => "hflip",
            PixelOp::Rrc { .. } => "rrc",
            PixelOp::Affine { .. } => "affine",
            PixelOp::Mixup { .. } => "mixup",
            PixelOp::Cutmix { .. } => "cutmix",
            PixelOp::Brightness { .. } => "brightness",
            PixelOp::Contrast { .. } => "contrast",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PixelOp::Rrc { scale, ratio } => {
                check_scale(scale)?;
                if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
                    return Err(invalid(format!("rrc ratio {ratio:?} must satisfy 0 < lo <= hi")));
                }
            }
            PixelOp::Affine {
                degrees,
                translate,
                shear,
            } => {
                if degrees < 0.0 || !(0.0..=0.5).contains(&translate) || !(0.0..90.0).contains(&shear) {
                    return Err(invalid("affine needs degrees >= 0, translate in [0, 0.5], shear in [0, 90)"));
                }
            }
            PixelOp::Mixup { alpha } | PixelOp::Cutmix { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(invalid(format!("mixing alpha {alpha} must be positive")));
                }
            }
            PixelOp::Brightness { max_delta } => {
                if !(0.0..=1.0).contains(&max_delta) {
                    return Err(invalid("brightness max_delta must lie in [0, 1]"));
                }
            }
            PixelOp::Contrast { low, high } => {
                if !(low >= 0.0 && low <= high) {
                    return Err(invalid("contrast needs 0 <= low <= high"));
                }
            }
            PixelOp::Identity | PixelOp::Hflip => {}
        }
        Ok(())
    }

    /// Whether the operator can act on token features (geometry or mixing).
    pub fn is_token_compatible(&self) -> bool {
        !matches!(self, PixelOp::Brightness { .. } | PixelOp::Contrast { .. })
    }

    pub fn is_geometric(&self) -> bool {
        matches!(
            self,
            PixelOp::Identity | PixelOp::Hflip | PixelOp::Rrc { .. } | PixelOp::Affine { .. }
        )
    }

    /// Draws concrete parameters. Cutmix boxes snap to a `grid` of cells so
    /// that they align with token boundaries.
    pub fn sample(&self, grid: (usize, usize), rng: &mut Rng) -> SampledAug {
        match *self {
            PixelOp::Identity => SampledAug::Identity,
            PixelOp::Hflip => SampledAug::Hflip,
            PixelOp::Rrc { scale, ratio } => SampledAug::Warp(sample_crop(scale, ratio, rng), Padding::Border),
            PixelOp::Affine {
                degrees,
                translate,
                shear,
            } => {
                let rot = uniform(rng, -degrees, degrees);
                let sh = uniform(rng, -shear, shear);
                let tx = uniform(rng, -translate, translate);
                let ty = uniform(rng, -translate, translate);
                SampledAug::Warp(Warp::affine(rot, sh, tx, ty), Padding::Reflect)
            }
            PixelOp::Mixup { alpha } => SampledAug::Mixup {
                lambda: beta(rng, alpha) as f32,
            },
            PixelOp::Cutmix { alpha } => {
                let lambda = beta(rng, alpha);
                let b = sample_box(lambda, grid.0, grid.1, rng);
                SampledAug::Cutmix {
                    top: b.0 as f64 / grid.0 as f64,
                    left: b.1 as f64 / grid.1 as f64,
                    height: b.2 as f64 / grid.0 as f64,
                    width: b.3 as f64 / grid.1 as f64,
                }
            }
            PixelOp::Brightness { max_delta } => SampledAug::Brightness {
                delta: uniform(rng, -max_delta, max_delta) as f32,
            },
            PixelOp::Contrast { low, high } => SampledAug::Contrast {
                factor: uniform(rng, low, high) as f32,
            },
        }
    }
}

pub(crate) fn check_scale(scale: (f64, f64)) -> Result<()> {
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(invalid(format!("crop scale range {scale:?} must lie in (0, 1]")));
    }
    Ok(())
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub(crate) fn beta(rng: &mut Rng, alpha: f64) -> f64 {
    Beta::new(alpha, alpha).expect("alpha validated").sample(rng)
}

/// Random-resized-crop box in the unit square: area fraction from `scale`,
/// log-uniform aspect ratio, falling back to the full square.
fn sample_crop(scale: (f64, f64), ratio: (f64, f64), rng: &mut Rng) -> Warp {
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let area = uniform(rng, scale.0, scale.1);
        let r = uniform(rng, lr0, lr1).exp();
        let width = (area * r).sqrt();
        let height = (area / r).sqrt();
        if width <= 1.0 && height <= 1.0 {
            let top = uniform(rng, 0.0, 1.0 - height);
            let left = uniform(rng, 0.0, 1.0 - width);
            return Warp::Crop {
                top,
                left,
                height,
                width,
            };
        }
    }
    Warp::Identity
}

/// CutMix box on an `h x w` grid: `(top, left, height, width)` in cells, with
/// side `sqrt(1 - lambda)` of the grid around a uniform center, clipped.
pub(crate) fn sample_box(lambda: f64, h: usize, w: usize, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let cut = (1.0 - lambda).max(0.0).sqrt();
    let ch = (h as f64 * cut) as i64;
    let cw = (w as f64 * cut) as i64;
    let cy = rng.random_range(0..h as i64);
    let cx = rng.random_range(0..w as i64);
    let y0 = (cy - ch / 2).clamp(0, h as i64);
    let y1 = (cy + ch / 2).clamp(0, h as i64);
    let x0 = (cx - cw / 2).clamp(0, w as i64);
    let x1 = (cx + cw / 2).clamp(0, w as i64);
    (y0 as usize, x0 as usize, (y1 - y0) as usize, (x1 - x0) as usize)
}

/// A fully parameterized augmentation draw.
#[derive(Debug, Clone, PartialEq)]
pub enum SampledAug {
    Identity,
    Hflip,
    Warp(Warp, Padding),
    Mixup { lambda: f32 },
    /// Box (normalized) pasted from the partner.
    Cutmix {
        top: f64,
        left: f64,
        height: f64,
        width: f64,
    },
    Brightness { delta: f32 },
    Contrast { factor: f32 },
}

impl SampledAug {
    pub fn needs_partner(&self) -> bool {
        matches!(self, SampledAug::Mixup { .. } | SampledAug::Cutmix { .. })
    }

    pub fn is_token_compatible(&self) -> bool {
        !matches!(self, SampledAug::Brightness { .. } | SampledAug::Contrast { .. })
    }

    fn box_cells(&self, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
        match *self {
            SampledAug::Cutmix {
                top,
                left,
                height,
                width,
            } => {
                let y0 = (top * h as f64).round() as usize;
                let x0 = (left * w as f64).round() as usize;
                let y1 = ((top + height) * h as f64).round() as usize;
                let x1 = ((left + width) * w as f64).round() as usize;
                Some((y0, x0, y1.min(h), x1.min(w)))
            }
            _ => None,
        }
    }

    /// Weight of the primary input's label in the output.
    pub fn primary_weight(&self) -> f64 {
        match *self {
            SampledAug::Mixup { lambda } => lambda as f64,
            SampledAug::Cutmix { height, width, .. } => 1.0 - height * width,
            _ => 1.0,
        }
    }

    /// Position-mixing matrices `(A, B)` with `out = A x + B partner`, each
    /// `(h*w) x (h*w)` row-major. Fails for photometric operators.
    pub fn mixing_matrices(&self, h: usize, w: usize) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
        let n = h * w;
        let eye = |scale: f32| {
            let mut m = vec![0.0f32; n * n];
            for i in 0..n {
                m[i * n + i] = scale;
            }
            m
        };
        Ok(match self {
            SampledAug::Identity => (eye(1.0), None),
            SampledAug::Hflip => (Taps::build(&Warp::Hflip, h, w, Interp::Nearest, Padding::Border).dense(), None),
            SampledAug::Warp(warp, pad) => (Taps::build(warp, h, w, Interp::Bilinear, *pad).dense(), None),
            SampledAug::Mixup { lambda } => (eye(*lambda), Some(eye(1.0 - lambda))),
            SampledAug::Cutmix { .. } => {
                let (y0, x0, y1, x1) = self.box_cells(h, w).unwrap();
                let mut a = eye(1.0);
                let mut b = vec![0.0f32; n * n];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let i = y * w + x;
                        a[i * n + i] = 0.0;
                        b[i * n + i] = 1.0;
                    }
                }
                (a, Some(b))
            }
            SampledAug::Brightness { .. } | SampledAug::Contrast { .. } => {
                return Err(invalid("photometric operators have no token-space action"))
            }
        })
    }

    fn apply_buffer(
        &self,
        h: usize,
        w: usize,
        c: usize,
        data: &[f32],
        partner: Option<&[f32]>,
        photometric_ok: bool,
    ) -> Result<Vec<f32>> {
        if self.needs_partner() && partner.is_none() {
            return Err(invalid("mixing augmentation needs a partner input"));
        }
        Ok(match self {
            SampledAug::Identity => data.to_vec(),
            SampledAug::Hflip => Taps::build(&Warp::Hflip, h, w, Interp::Nearest, Padding::Border).apply(data, c),
            SampledAug::Warp(warp, pad) => Taps::build(warp, h, w, Interp::Bilinear, *pad).apply(data, c),
            SampledAug::Mixup { lambda } => {
                let p = partner.unwrap();
                data.iter().zip(p).map(|(a, b)| b + lambda * (a - b)).collect()
            }
            SampledAug::Cutmix { .. } => {
                let p = partner.unwrap();
                let (y0, x0, y1, x1) = self.box_cells(h, w).unwrap();
                let mut out = data.to_vec();
                for y in y0..y1 {
                    let s = (y * w + x0) * c;
                    let e = (y * w + x1) * c;
                    out[s..e].copy_from_slice(&p[s..e]);
                }
                out
            }
            SampledAug::Brightness { delta } if photometric_ok => {
                data.iter().map(|v| (v + delta * 255.0).clamp(0.0, 255.0)).collect()
            }
            SampledAug::Contrast { factor } if photometric_ok => {
                data.iter().map(|v| (v * factor).clamp(0.0, 255.0)).collect()
            }
            _ => return Err(invalid("photometric operators have no token-space action")),
        })
    }

    pub fn apply_image(&self, img: &Image, partner: Option<&Image>) -> Result<Image> {
        if let Some(p) = partner {
            if (p.height, p.width, p.channels) != (img.height, img.width, img.channels) {
                return Err(shape("mixing partner must match the image shape"));
            }
        }
        let data = self.apply_buffer(
            img.height,
            img.width,
            img.channels,
            &img.data,
            partner.map(|p| p.data.as_slice()),
            true,
        )?;
        Image::new(img.height, img.width, img.channels, data)
    }

    /// Acts on an `h x w x d` feature grid as on a `d`-channel image.
    pub fn apply_features(&self, grid: &EmbeddingGrid, partner: Option<&EmbeddingGrid>) -> Result<EmbeddingGrid> {
        if let Some(p) = partner {
            if !p.same_shape(grid) {
                return Err(shape("mixing partner must match the grid shape"));
            }
        }
        let values = self.apply_buffer(
            grid.h,
            grid.w,
            grid.d,
            &grid.values,
            partner.map(|p| p.values.as_slice()),
            false,
        )?;
        EmbeddingGrid::new(grid.h, grid.w, grid.d, values)
    }
}

/// Samples and applies a pixel operator. Cutmix boxes snap to `grid` cells.
pub fn pixel_aug(
    image: &Image,
    op: &PixelOp,
    partner: Option<&Image>,
    grid: (usize, usize),
    rng: &mut Rng,
) -> Result<Image> {
    op.validate()?;
    op.sample(grid, rng).apply_image(image, partner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = seeded(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn hflip_involution() {
        let x = random_image(1, 6, 9);
        let mut rng = seeded(0);
        let once = pixel_aug(&x, &PixelOp::Hflip, None, (1, 1), &mut rng).unwrap();
        assert_ne!(once, x);
        assert_eq!(pixel_aug(&once, &PixelOp::Hflip, None, (1, 1), &mut rng).unwrap(), x);
    }

    #[test]
    fn mixup_with_itself_is_identity() {
        let x = random_image(2, 8, 8);
        for s in 0..10 {
            let mut rng = seeded(s);
            assert_eq!(pixel_aug(&x, &PixelOp::mixup(), Some(&x), (8, 8), &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn zero_affine_identity() {
        let x = random_image(3, 16, 16);
        let op = PixelOp::Affine { degrees: 0.0, translate: 0.0, shear: 0.0 };
        let y = pixel_aug(&x, &op, None, (2, 2), &mut seeded(4)).unwrap();
        for (a, b) in x.data.iter().zip(&y.data) {
            assert!((a - b).abs() < 1e-6 * 255.0);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let x = random_image(5, 16, 16);
        for op in [PixelOp::rrc(), PixelOp::affine(), PixelOp::Brightness { max_delta: 0.2 }] {
            let a = pixel_aug(&x, &op, None, (2, 2), &mut seeded(8)).unwrap();
            let b = pixel_aug(&x, &op, None, (2, 2), &mut seeded(8)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let x = random_image(5, 8, 8);
        let bad = [
            PixelOp::Rrc { scale: (0.0, 1.0), ratio: (0.75, 1.33) },
            PixelOp::Rrc { scale: (0.5, 1.5), ratio: (0.75, 1.33) },
            PixelOp::Mixup { alpha: 0.0 },
            PixelOp::Contrast { low: 2.0, high: 1.0 },
        ];
        for op in bad {
            assert!(pixel_aug(&x, &op, Some(&x), (1, 1), &mut seeded(0)).is_err());
        }
        assert!(pixel_aug(&x, &PixelOp::mixup(), None, (1, 1), &mut seeded(0)).is_err());
    }

    #[test]
    fn cutmix_box_aligns_with_grid() {
        let a = Image::filled(16, 16, 3, &[0.0; 3]);
        let b = Image::filled(16, 16, 3, &[200.0; 3]);
        for s in 0..20 {
            let mut rng = seeded(s);
            let aug = PixelOp::cutmix().sample((4, 4), &mut rng);
            let out = aug.apply_image(&a, Some(&b)).unwrap();
            let pasted = out.data.iter().filter(|v| **v == 200.0).count() as f64 / out.data.len() as f64;
            assert!((pasted - (1.0 - aug.primary_weight())).abs() < 1e-9);
            // each 4x4 pixel block is uniform
            for by in 0..4 {
                for bx in 0..4 {
                    let v = out.get(by * 4, bx * 4, 0);
                    for y in 0..4 {
                        for x in 0..4 {
                            assert_eq!(out.get(by * 4 + y, bx * 4 + x, 0), v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn feature_and_matrix_actions_agree() {
        let mut rng = seeded(12);
        let g = EmbeddingGrid::new(4, 4, 3, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = EmbeddingGrid::new(4, 4, 3, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for op in [PixelOp::Hflip, PixelOp::rrc(), PixelOp::affine(), PixelOp::mixup(), PixelOp::cutmix()] {
            let aug = op.sample((4, 4), &mut rng);
            let direct = aug.apply_features(&g, Some(&p)).unwrap();
            let (a, b) = aug.mixing_matrices(4, 4).unwrap();
            for o in 0..16 {
                for c in 0..3 {
                    let mut v = 0.0f32;
                    for i in 0..16 {
                        v += a[o * 16 + i] * g.values[i * 3 + c];
                        if let Some(b) = &b {
                            v += b[o * 16 + i] * p.values[i * 3 + c];
                        }
                    }
                    assert!((v - direct.values[o * 3 + c]).abs() < 1e-5, "{}", op.name());
                }
            }
        }
        assert!(SampledAug::Brightness { delta: 0.1 }.mixing_matrices(2, 2).is_err());
    }
}
