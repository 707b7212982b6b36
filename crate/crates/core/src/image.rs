//! Dense HWC float images with values on the 0..=255 scale.

use std::path::Path;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: &[f32]) -> Self {
        assert_eq!(value.len(), channels);
        let mut data = Vec::with_capacity(height * width * channels);
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    /// Bytes the image occupies as 8-bit raw pixels.
    pub fn raw_bytes(&self) -> u64 {
        (self.height * self.width * self.channels) as u64
    }

    pub fn clamp_pixels(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 255.0);
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            3,
            bytes.iter().map(|&b| b as f32).collect(),
        )
    }

    /// Mean squared difference per value.
    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        s / self.data.len() as f64
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match self.channels {
            3 => self.to_rgb8(),
            1 => self
                .to_rgb8()
                .into_iter()
                .flat_map(|v| [v, v, v])
                .collect(),
            c => return Err(invalid(format!("cannot save a {c}-channel image"))),
        };
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        buf.save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Places images side by side (all must share height and channel count).
pub fn hstack(images: &[Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::Empty("hstack".into()))?;
    if images
        .iter()
        .any(|i| i.height != first.height || i.channels != first.channels)
    {
        return Err(Error::Shape("hstack needs equal heights".into()));
    }
    let width: usize = images.iter().map(|i| i.width).sum();
    let mut out = Image::zeros(first.height, width, first.channels);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..img.channels {
                    out.set(y, x0 + x, c, img.get(y, x, c));
                }
            }
        }
        x0 += img.width;
    }
    Ok(out)
}
