//! Dataset ingestion and the on-disk token dataset layout.
//!
//! Image folders follow `<root>/<split>/<class>/<name>.png`; class names
//! come from the `train` split, sorted. Token datasets are directories
//! holding `<split>.stok`, `<split>.labels` and `<split>.manifest.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use stok::codec::{pack_labels, pack_tokens, unpack_labels, unpack_tokens, Codebook, DatasetManifest, TokenGrid};
use stok::image::Image;
use stok::toy::{toy_dataset, CLASS_NAMES};

use crate::config::{DataConfig, DataSource};
use crate::error::{CliError, CliResult};

pub const SPLITS: [&str; 2] = ["train", "val"];

#[derive(Debug, Clone)]
pub struct ImageSplit {
    pub images: Vec<Image>,
    pub labels: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct ImageData {
    pub class_names: Vec<String>,
    pub train: ImageSplit,
    pub val: ImageSplit,
}

impl ImageData {
    pub fn split(&self, name: &str) -> CliResult<&ImageSplit> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(CliError::Config(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

pub fn load_images(cfg: &DataConfig) -> CliResult<ImageData> {
    match cfg.source {
        DataSource::Toy => {
            let all = toy_dataset(cfg.toy_train + cfg.toy_val, cfg.toy_size, cfg.toy_seed)?;
            let (mut train, mut val) = (
                ImageSplit {
                    images: Vec::new(),
                    labels: Vec::new(),
                },
                ImageSplit {
                    images: Vec::new(),
                    labels: Vec::new(),
                },
            );
            for (i, s) in all.into_iter().enumerate() {
                let dst = if i < cfg.toy_train { &mut train } else { &mut val };
                dst.images.push(s.image);
                dst.labels.push(s.label);
            }
            Ok(ImageData {
                class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                train,
                val,
            })
        }
        DataSource::Folder => {
            let root = cfg.path.as_ref().ok_or_else(|| CliError::Config("data.path is not set".into()))?;
            load_folder(root)
        }
    }
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Data(format!("cannot list `{}`: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in rd {
        let p = e.map_err(|e| CliError::Data(format!("cannot list `{}`: {e}", dir.display())))?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_folder(root: &Path) -> CliResult<ImageData> {
    if !root.is_dir() {
        return Err(CliError::Missing(format!("image folder `{}`", root.display())));
    }
    for p in sorted_entries(root)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !p.is_dir() || !SPLITS.contains(&name) {
            return Err(CliError::Data(format!(
                "`{}`: expected only `train/` and `val/` split directories",
                p.display()
            )));
        }
    }
    let train_dir = root.join("train");
    if !train_dir.is_dir() {
        return Err(CliError::Data(format!("`{}`: missing train split", train_dir.display())));
    }
    let mut class_names = Vec::new();
    for p in sorted_entries(&train_dir)? {
        if !p.is_dir() {
            return Err(CliError::Data(format!("`{}`: expected a class directory", p.display())));
        }
        class_names.push(p.file_name().unwrap().to_string_lossy().into_owned());
    }
    if class_names.len() > u16::MAX as usize {
        return Err(CliError::Data("too many classes for u16 labels".into()));
    }
    let mut dims: Option<(usize, usize)> = None;
    let mut read_split = |name: &str| -> CliResult<ImageSplit> {
        let mut split = ImageSplit {
            images: Vec::new(),
            labels: Vec::new(),
        };
        let dir = root.join(name);
        if !dir.is_dir() {
            return Ok(split);
        }
        for cdir in sorted_entries(&dir)? {
            let cname = cdir.file_name().unwrap().to_string_lossy().into_owned();
            let label = class_names.iter().position(|c| *c == cname).ok_or_else(|| {
                CliError::Data(format!("`{}`: class not present in the train split", cdir.display()))
            })?;
            if !cdir.is_dir() {
                return Err(CliError::Data(format!("`{}`: expected a class directory", cdir.display())));
            }
            for f in sorted_entries(&cdir)? {
                let is_png = f.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
                if !f.is_file() || !is_png {
                    return Err(CliError::Data(format!("`{}`: expected a .png file", f.display())));
                }
                let img = Image::load(&f).map_err(|e| CliError::Data(format!("`{}`: {e}", f.display())))?;
                let d = (img.height, img.width);
                if *dims.get_or_insert(d) != d {
                    return Err(CliError::Data(format!(
                        "`{}`: size {}x{} differs from the first image",
                        f.display(),
                        d.0,
                        d.1
                    )));
                }
                split.images.push(img);
                split.labels.push(label as u16);
            }
        }
        Ok(split)
    };
    let train = read_split("train")?;
    let val = read_split("val")?;
    if train.images.is_empty() {
        return Err(CliError::Data(format!("`{}`: no training images", train_dir.display())));
    }
    Ok(ImageData {
        class_names,
        train,
        val,
    })
}

/// One split of a token dataset after verification.
#[derive(Debug, Clone)]
pub struct TokenSplit {
    pub manifest: DatasetManifest,
    pub grids: Vec<TokenGrid>,
}

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{split}.stok")),
        dir.join(format!("{split}.labels")),
        dir.join(format!("{split}.manifest.toml")),
    )
}

/// Serialized split files: `(tokens, labels, manifest)`.
pub fn encode_split(
    grids: &[TokenGrid],
    codebook: &Codebook,
    raw_pixel_bytes: u64,
    class_names: &[String],
) -> CliResult<(Vec<u8>, Vec<u8>, DatasetManifest)> {
    let payload = pack_tokens(grids, codebook.k())?;
    let labels: Vec<u16> = grids.iter().map(|g| g.label.unwrap_or(0)).collect();
    let (h, w) = grids.first().map_or((0, 0), |g| (g.h, g.w));
    let manifest = DatasetManifest::describe(
        &payload,
        grids.len() as u64,
        (h, w),
        codebook.k(),
        codebook.id(),
        raw_pixel_bytes,
        class_names.to_vec(),
    );
    Ok((payload, pack_labels(&labels), manifest))
}

pub fn read_manifest(dir: &Path, split: &str) -> CliResult<DatasetManifest> {
    let (_, _, mpath) = split_paths(dir, split);
    let text = fs::read_to_string(&mpath)
        .map_err(|_| CliError::Missing(format!("token manifest `{}`", mpath.display())))?;
    DatasetManifest::from_toml(&text).map_err(|e| CliError::Data(format!("`{}`: {e}", mpath.display())))
}

/// Loads and verifies a split against its manifest and `codebook`.
pub fn load_tokens(dir: &Path, split: &str, codebook: &Codebook) -> CliResult<TokenSplit> {
    let manifest = read_manifest(dir, split)?;
    let (tpath, lpath, _) = split_paths(dir, split);
    let payload = fs::read(&tpath).map_err(|_| CliError::Missing(format!("token file `{}`", tpath.display())))?;
    manifest
        .verify_payload(&payload)
        .map_err(|e| CliError::Data(format!("`{}`: {e}", tpath.display())))?;
    if manifest.codebook_id != codebook.id() {
        return Err(CliError::Data(format!(
            "`{}` was tokenized with codebook {}, but {} was given",
            tpath.display(),
            manifest.codebook_id,
            codebook.id()
        )));
    }
    let (_, mut grids) = unpack_tokens(&payload).map_err(|e| CliError::Data(format!("`{}`: {e}", tpath.display())))?;
    let lbytes = fs::read(&lpath).map_err(|_| CliError::Missing(format!("label file `{}`", lpath.display())))?;
    let labels =
        unpack_labels(&lbytes, grids.len()).map_err(|e| CliError::Data(format!("`{}`: {e}", lpath.display())))?;
    let nc = manifest.class_names.len();
    for (g, y) in grids.iter_mut().zip(labels) {
        if nc > 0 && y as usize >= nc {
            return Err(CliError::Data(format!("`{}`: label {y} >= {nc} classes", lpath.display())));
        }
        g.label = Some(y);
    }
    Ok(TokenSplit { manifest, grids })
}

pub fn load_codebook(path: &Path) -> CliResult<Codebook> {
    let bytes = fs::read(path).map_err(|_| CliError::Missing(format!("codebook file `{}`", path.display())))?;
    Codebook::from_bytes(&bytes).map_err(|e| CliError::Data(format!("`{}`: {e}", path.display())))
}
