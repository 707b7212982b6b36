//! Geometric resampling shared by pixel images and feature grids.
//!
//! Warps are expressed in normalized coordinates (the unit square, pixel
//! centers at `(i + 0.5) / n`), so one sampled augmentation acts identically
//! on a 64x64 image and on the 8x8 feature grid of its tokens.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interp {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Padding {
    Border,
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Warp {
    Identity,
    Hflip,
    /// Crop `[top, top + height) x [left, left + width)` of the unit square,
    /// resized back to full size.
    Crop {
        top: f64,
        left: f64,
        height: f64,
        width: f64,
    },
    /// Output point `p` (centered, in `[-0.5, 0.5]^2`, as `(x, y)`) samples
    /// source point `inverse * (p - translate)`.
    Affine {
        inverse: [[f64; 2]; 2],
        translate: [f64; 2],
    },
}

impl Warp {
    /// Rotation by `degrees`, shear along x by `shear_deg`, then translation
    /// by `(tx, ty)` in fractions of the side.
    pub fn affine(degrees: f64, shear_deg: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let sh = shear_deg.to_radians().tan();
        // forward = R * S with S = [[1, sh], [0, 1]]
        let fwd = [[c, c * sh - s], [s, s * sh + c]];
        let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
        let inverse = [
            [fwd[1][1] / det, -fwd[0][1] / det],
            [-fwd[1][0] / det, fwd[0][0] / det],
        ];
        Warp::Affine {
            inverse,
            translate: [tx, ty],
        }
    }

    /// Source location (normalized `(x, y)`) of a normalized output point.
    fn source(&self, u: f64, v: f64) -> (f64, f64) {
        match *self {
            Warp::Identity => (u, v),
            Warp::Hflip => (1.0 - u, v),
            Warp::Crop {
                top,
                left,
                height,
                width,
            } => (left + u * width, top + v * height),
            Warp::Affine { inverse, translate } => {
                let px = u - 0.5 - translate[0];
                let py = v - 0.5 - translate[1];
                (
                    inverse[0][0] * px + inverse[0][1] * py + 0.5,
                    inverse[1][0] * px + inverse[1][1] * py + 0.5,
                )
            }
        }
    }
}

/// Up to four `(source index, weight)` taps per output position.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub h: usize,
    pub w: usize,
    pub taps: Vec<Vec<(usize, f32)>>,
}

fn reflect(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn border(i: i64, n: i64) -> usize {
    i.clamp(0, n - 1) as usize
}

impl Taps {
    pub fn build(warp: &Warp, h: usize, w: usize, interp: Interp, pad: Padding) -> Self {
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let t = match warp {
                    Warp::Identity => vec![(y * w + x, 1.0)],
                    Warp::Hflip => vec![(y * w + (w - 1 - x), 1.0)],
                    _ => {
                        let u = (x as f64 + 0.5) / w as f64;
                        let v = (y as f64 + 0.5) / h as f64;
                        let (sx, sy) = warp.source(u, v);
                        sample_taps(sx * w as f64 - 0.5, sy * h as f64 - 0.5, h, w, interp, pad)
                    }
                };
                taps.push(t);
            }
        }
        Self { h, w, taps }
    }

    /// Resamples a row-major `h x w x c` buffer.
    pub fn apply(&self, src: &[f32], c: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; self.h * self.w * c];
        for (o, taps) in self.taps.iter().enumerate() {
            let dst = &mut out[o * c..(o + 1) * c];
            if let [(i, wgt)] = taps.as_slice() {
                if *wgt == 1.0 {
                    dst.copy_from_slice(&src[i * c..(i + 1) * c]);
                    continue;
                }
            }
            for &(i, wgt) in taps {
                for (d, s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *d += wgt * s;
                }
            }
        }
        out
    }

    /// Dense `(h*w) x (h*w)` row-major resampling matrix.
    pub fn dense(&self) -> Vec<f32> {
        let n = self.h * self.w;
        let mut m = vec![0.0f32; n * n];
        for (o, taps) in self.taps.iter().enumerate() {
            for &(i, wgt) in taps {
                m[o * n + i] += wgt;
            }
        }
        m
    }
}

fn sample_taps(fx: f64, fy: f64, h: usize, w: usize, interp: Interp, pad: Padding) -> Vec<(usize, f32)> {
    let (hi, wi) = (h as i64, w as i64);
    let idx = |yy: i64, xx: i64| -> usize {
        let (ry, rx) = match pad {
            Padding::Border => (border(yy, hi), border(xx, wi)),
            Padding::Reflect => (reflect(yy, hi), reflect(xx, wi)),
        };
        ry * w + rx
    };
    match interp {
        Interp::Nearest => vec![(idx(fy.round() as i64, fx.round() as i64), 1.0)],
        Interp::Bilinear => {
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let mut t: Vec<(usize, f32)> = Vec::with_capacity(4);
            for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                    let wgt = wy * wx;
                    if wgt > 1e-12 {
                        t.push((idx(y0 + dy, x0 + dx), wgt as f32));
                    }
                }
            }
            t
        }
    }
}
