//! Image tokenizers. The built-in one cuts an image into non-overlapping
//! `p x p` patches and vector-quantizes each flattened patch against a
//! k-means codebook; its decoder tiles the codewords back into pixels.

use super::codebook::Codebook;
use super::grid::TokenGrid;
use super::kmeans::{codebook_from_fit, fit_kmeans, KMeansConfig};
use crate::error::{invalid, shape, Error, Result};
use crate::image::Image;

/// Anything that turns images into token grids over a fixed codebook.
pub trait Tokenizer {
    fn codebook(&self) -> &Codebook;
    fn tokenize(&self, image: &Image) -> Result<TokenGrid>;
    fn decode(&self, grid: &TokenGrid) -> Result<Image>;
}

#[derive(Debug, Clone)]
pub struct PatchTokenizer {
    pub codebook: Codebook,
    pub patch_size: usize,
}

impl PatchTokenizer {
    pub fn new(codebook: Codebook, patch_size: usize) -> Result<Self> {
        if codebook.d() != patch_size * patch_size * 3 {
            return Err(shape(format!(
                "codebook dim {} does not fit {patch_size}x{patch_size} RGB patches",
                codebook.d()
            )));
        }
        Ok(Self {
            codebook,
            patch_size,
        })
    }

    pub fn fit(images: &[Image], patch_size: usize, k: usize, seed: u64) -> Result<Self> {
        Self::new(fit_toy_codebook(images, patch_size, k, seed)?, patch_size)
    }
}

impl Tokenizer for PatchTokenizer {
    fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    fn tokenize(&self, image: &Image) -> Result<TokenGrid> {
        tokenize_image(image, &self.codebook, self.patch_size)
    }

    fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        decode_tokens(grid, &self.codebook, self.patch_size)
    }
}

fn check_patch_grid(image: &Image, p: usize) -> Result<(usize, usize)> {
    if p == 0 {
        return Err(invalid("patch size must be positive"));
    }
    if image.channels != 3 {
        return Err(shape(format!("expected an RGB image, got {} channels", image.channels)));
    }
    if image.height % p != 0 || image.width % p != 0 {
        return Err(shape(format!(
            "patch size {p} does not divide image {}x{}",
            image.height, image.width
        )));
    }
    Ok((image.height / p, image.width / p))
}

/// Flattens each patch as (row, col, channel), patches in row-major order.
pub fn extract_patches(image: &Image, p: usize) -> Result<Vec<f32>> {
    let (gh, gw) = check_patch_grid(image, p)?;
    let mut out = Vec::with_capacity(image.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for y in 0..p {
                let start = image.idx(gy * p + y, gx * p, 0);
                out.extend_from_slice(&image.data[start..start + p * 3]);
            }
        }
    }
    Ok(out)
}

pub fn fit_toy_codebook(images: &[Image], patch_size: usize, k: usize, seed: u64) -> Result<Codebook> {
    if images.is_empty() {
        return Err(Error::Empty("no images to fit a codebook on".into()));
    }
    let mut points = Vec::new();
    for img in images {
        points.extend(extract_patches(img, patch_size)?);
    }
    let d = patch_size * patch_size * 3;
    let fit = fit_kmeans(&points, d, k, seed, KMeansConfig::default())?;
    codebook_from_fit(&fit, d)
}

pub fn tokenize_image(image: &Image, codebook: &Codebook, patch_size: usize) -> Result<TokenGrid> {
    let (gh, gw) = check_patch_grid(image, patch_size)?;
    if codebook.d() != patch_size * patch_size * 3 {
        return Err(shape(format!(
            "codebook dim {} does not fit {patch_size}x{patch_size} RGB patches",
            codebook.d()
        )));
    }
    let patches = extract_patches(image, patch_size)?;
    TokenGrid::new(gh, gw, codebook.nearest(&patches)?)
}

/// Tokenizes many images with one batched nearest-codeword search.
pub fn tokenize_batch(images: &[Image], codebook: &Codebook, patch_size: usize) -> Result<Vec<TokenGrid>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (gh, gw) = check_patch_grid(first, patch_size)?;
    if codebook.d() != patch_size * patch_size * 3 {
        return Err(shape("codebook dim does not fit the patch size"));
    }
    let mut patches = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if check_patch_grid(img, patch_size)? != (gh, gw) {
            return Err(shape("images in a batch must share dimensions"));
        }
        patches.extend(extract_patches(img, patch_size)?);
    }
    let idx = codebook.nearest(&patches)?;
    idx.chunks_exact(gh * gw)
        .map(|c| TokenGrid::new(gh, gw, c.to_vec()))
        .collect()
}

pub fn decode_tokens(grid: &TokenGrid, codebook: &Codebook, patch_size: usize) -> Result<Image> {
    let p = patch_size;
    if codebook.d() != p * p * 3 {
        return Err(shape(format!(
            "codebook dim {} does not fit {p}x{p} RGB patches",
            codebook.d()
        )));
    }
    grid.check_range(codebook.k())?;
    let mut img = Image::zeros(grid.h * p, grid.w * p, 3);
    for gy in 0..grid.h {
        for gx in 0..grid.w {
            let row = codebook.row(grid.get(gy, gx) as usize);
            for y in 0..p {
                let dst = img.idx(gy * p + y, gx * p, 0);
                img.data[dst..dst + p * 3].copy_from_slice(&row[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    img.clamp_pixels();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(rgb: [f32; 3], size: usize) -> Image {
        Image::filled(size, size, 3, &rgb)
    }

    #[test]
    fn four_solid_colors() {
        let colors = [[255.0, 0.0, 0.0], [0.0, 255.0, 0.0], [0.0, 0.0, 255.0], [255.0, 255.0, 255.0]];
        let imgs: Vec<Image> = colors.iter().map(|c| solid(*c, 8)).collect();
        let cb = fit_toy_codebook(&imgs, 4, 4, 1).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..4).map(|k| cb.row(k).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<Vec<f32>> = colors.iter().map(|c| c.repeat(16)).collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, expect);
    }

    #[test]
    fn two_constant_patch_values() {
        let imgs = vec![solid([0.0; 3], 4), solid([1.0; 3], 4)];
        let cb = fit_toy_codebook(&imgs, 2, 2, 5).unwrap();
        let mut rows: Vec<Vec<f32>> = (0..2).map(|k| cb.row(k).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0; 12], vec![1.0; 12]]);
    }

    #[test]
    fn fit_errors() {
        let imgs = vec![solid([0.0; 3], 4)];
        assert!(matches!(fit_toy_codebook(&imgs, 2, 2, 0), Err(Error::TooFewPatches { .. })));
        assert!(matches!(fit_toy_codebook(&imgs, 3, 2, 0), Err(Error::Shape(_))));
        assert!(fit_toy_codebook(&[], 2, 2, 0).is_err());
    }

    fn codeword_tiles() -> (Codebook, usize) {
        let p = 2;
        let d = p * p * 3;
        let entries: Vec<f32> = (0..4 * d).map(|i| ((i * 37) % 251) as f32).collect();
        (Codebook::new(entries, 4, d).unwrap(), p)
    }

    #[test]
    fn tiled_codewords_tokenize_exactly() {
        let (cb, p) = codeword_tiles();
        let grid = TokenGrid::from_rows(&[&[3, 0], &[1, 2]]).unwrap();
        let img = decode_tokens(&grid, &cb, p).unwrap();
        assert_eq!(tokenize_image(&img, &cb, p).unwrap().indices, grid.indices);
        let again = decode_tokens(&tokenize_image(&img, &cb, p).unwrap(), &cb, p).unwrap();
        assert_eq!(again, img);
    }

    #[test]
    fn repeated_index_decodes_to_constant_texture() {
        let (cb, p) = codeword_tiles();
        let grid = TokenGrid::new(3, 2, vec![1; 6]).unwrap();
        let img = decode_tokens(&grid, &cb, p).unwrap();
        let first = extract_patches(&img, p).unwrap();
        for patch in first.chunks_exact(p * p * 3) {
            assert_eq!(patch, cb.row(1));
        }
    }

    #[test]
    fn gray_image_maps_to_nearest_codeword() {
        let d = 12;
        let mut entries = Vec::new();
        for v in [0.0f32, 120.0, 255.0] {
            entries.extend(std::iter::repeat(v).take(d));
        }
        let cb = Codebook::new(entries, 3, d).unwrap();
        let img = solid([128.0; 3], 6);
        let g = tokenize_image(&img, &cb, 2).unwrap();
        assert!(g.indices.iter().all(|&t| t == 1));
    }

    #[test]
    fn decode_clamps() {
        let d = 3;
        let cb = Codebook::new(vec![-20.0, 10.0, 300.0, 1.0, 2.0, 3.0], 2, d).unwrap();
        let img = decode_tokens(&TokenGrid::new(1, 1, vec![0]).unwrap(), &cb, 1).unwrap();
        assert_eq!(img.data, vec![0.0, 10.0, 255.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let (cb, _) = codeword_tiles();
        assert!(tokenize_image(&solid([0.0; 3], 6), &cb, 3).is_err());
        assert!(decode_tokens(&TokenGrid::new(1, 1, vec![0]).unwrap(), &cb, 3).is_err());
    }
}
