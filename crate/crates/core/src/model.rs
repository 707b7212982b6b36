//! Transformer classifier over embedding grids, its supervised and
//! fine-tuning loops, and clean / corrupted evaluation.
//!
//! Encoder parameter names (`stem.*`, `blocks.{i}.*`, `norm.*`) are shared
//! with [`crate::mtm::MtmModel`] so pre-trained encoders load directly.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{corrupt, CorruptionKind, Pipeline, TokenAdapter};
use crate::codec::{extract_patches, tokenize_batch, Codebook, EmbeddingGrid, TokenGrid};
use crate::error::{invalid, shape, Error, Result};
use crate::image::Image;
use crate::nn::{
    sincos_tensor, soft_cross_entropy, AdamW, AdamWConfig, Block, Checkpoint, CosineSchedule, Init, LayerNorm, Linear,
    NamedTensor, ParamStore, Stem, StemKind,
};
use crate::rng::{seeded, stream, Rng};
use crate::tokenadapt::argmax_row;

pub const MODEL_MAGIC: [u8; 4] = *b"SMOD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub stem: StemKind,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Input channels per grid cell (codeword dimension).
    pub d: usize,
    pub k: usize,
    pub num_classes: usize,
    pub emb_mean: f64,
    pub emb_std: f64,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn for_codebook(codebook: &Codebook, grid: (usize, usize), num_classes: usize, seed: u64) -> Self {
        let ta = crate::tokenadapt::TokenAdaptConfig::for_codebook(codebook, 1, seed);
        Self {
            depth: 6,
            width: 192,
            heads: 3,
            mlp_ratio: 4.0,
            stem: StemKind::Conv4x4Overlap,
            grid_h: grid.0,
            grid_w: grid.1,
            d: codebook.d(),
            k: codebook.k(),
            num_classes,
            emb_mean: ta.emb_mean,
            emb_std: ta.emb_std,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 || self.width % 4 != 0 {
            return Err(invalid(format!(
                "width {} must be a multiple of 4 and of heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.num_classes == 0 || self.d == 0 {
            return Err(invalid("depth, num_classes and d must be positive"));
        }
        let (ph, pw) = self.stem.output_grid(self.grid_h, self.grid_w);
        if ph == 0 || pw == 0 || self.grid_h < 2 || self.grid_w < 2 {
            return Err(invalid("grid too small for the stem"));
        }
        if !(self.emb_std > 0.0) || !self.emb_mean.is_finite() {
            return Err(invalid("emb_std must be positive and emb_mean finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 1.5e-3,
            min_lr: 1e-5,
            weight_decay: 0.1,
            warmup_epochs: 2,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.min_lr >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid("lr, min_lr must be >= 0 and label_smoothing in [0, 1)"));
        }
        Ok(())
    }
}

/// One metrics row, written as `epoch,split,metric,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.split, self.metric, self.value)
    }

    pub fn write_csv<W: Write>(records: &[MetricRecord], mut w: W) -> std::io::Result<()> {
        for r in records {
            writeln!(w, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

pub struct Classifier {
    config: BackboneConfig,
    codebook_id: String,
    params: ParamStore,
    stem: Stem,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    pe: Tensor,
}

impl Classifier {
    pub fn new(config: BackboneConfig, codebook_id: &str, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut ps = ParamStore::new(dtype);
        let c = &config;
        let stem = Stem::new(&mut ps, "stem", c.stem, c.d, c.width, &mut rng)?;
        let blocks = (0..c.depth)
            .map(|i| Block::new(&mut ps, &format!("blocks.{i}"), c.width, c.heads, c.mlp_ratio, false, &mut rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut ps, "norm", c.width, &mut rng)?;
        let head = Linear::with_init(&mut ps, "head", c.width, c.num_classes, Init::TruncNormal(0.02), true, &mut rng)?;
        let (ph, pw) = c.stem.output_grid(c.grid_h, c.grid_w);
        let pe = sincos_tensor(ph, pw, c.width, dtype)?;
        Ok(Self {
            config,
            codebook_id: codebook_id.to_string(),
            params: ps,
            stem,
            blocks,
            norm,
            head,
            pe,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn codebook_id(&self) -> &str {
        &self.codebook_id
    }

    fn input_tensor(&self, z: &[EmbeddingGrid]) -> Result<Tensor> {
        let c = &self.config;
        if z.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let mut data = Vec::with_capacity(z.len() * c.grid_h * c.grid_w * c.d);
        for g in z {
            if (g.h, g.w, g.d) != (c.grid_h, c.grid_w, c.d) {
                return Err(shape(format!(
                    "grid {}x{}x{} does not match model {}x{}x{}",
                    g.h, g.w, g.d, c.grid_h, c.grid_w, c.d
                )));
            }
            data.extend_from_slice(&g.values);
        }
        let t = Tensor::from_vec(data, (z.len(), c.grid_h, c.grid_w, c.d), &Device::Cpu)?.to_dtype(DType::F64)?;
        Ok(((t - c.emb_mean)? / c.emb_std)?.to_dtype(self.params.dtype())?)
    }

    /// Normalized patch features `(B, P, width)`.
    pub fn forward_backbone(&self, z: &[EmbeddingGrid]) -> Result<Tensor> {
        let mut x = self.stem.forward(&self.input_tensor(z)?)?.broadcast_add(&self.pe)?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        Ok(self.norm.forward(&x)?)
    }

    /// Mean-pooled features `(B, width)`.
    pub fn pooled(&self, z: &[EmbeddingGrid]) -> Result<Tensor> {
        Ok(self.forward_backbone(z)?.mean(1)?)
    }

    pub fn logits(&self, z: &[EmbeddingGrid]) -> Result<Tensor> {
        self.head.forward(&self.pooled(z)?)
    }

    /// Soft-target cross-entropy with label smoothing `eps`.
    pub fn loss(&self, z: &[EmbeddingGrid], targets: &[Vec<f32>], eps: f64) -> Result<Tensor> {
        let c = self.config.num_classes;
        if targets.len() != z.len() || targets.iter().any(|t| t.len() != c) {
            return Err(shape("one target vector of num_classes entries per sample required"));
        }
        let flat: Vec<f32> = targets
            .iter()
            .flat_map(|t| t.iter().map(move |&v| ((1.0 - eps) * v as f64 + eps / c as f64) as f32))
            .collect();
        let t = Tensor::from_vec(flat, (z.len(), c), &Device::Cpu)?.to_dtype(self.params.dtype())?;
        soft_cross_entropy(&self.logits(z)?, &t)
    }

    pub fn predict(&self, z: &[EmbeddingGrid]) -> Result<Vec<u32>> {
        let c = self.config.num_classes;
        let mut out = Vec::with_capacity(z.len());
        for chunk in z.chunks(256) {
            let l: Vec<f32> = self.logits(chunk)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            out.extend(l.chunks(c).map(argmax_row));
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            magic: MODEL_MAGIC,
            config: serde_json::to_value(&self.config).map_err(|e| invalid(e.to_string()))?,
            codebook_id: self.codebook_id.clone(),
            params: self.params.export()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = Self::new(ckpt.config_as()?, &ckpt.codebook_id, DType::F32)?;
        m.params.load_exact(&ckpt.params)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, &MODEL_MAGIC)?)
    }

    /// Loads encoder weights from a pre-training (`SMTM`) or classifier
    /// (`SMOD`) checkpoint. Stem and head are re-initialized when their
    /// shapes differ; decoder weights are skipped. Any other missing,
    /// reshaped or unknown parameter is an error listing all of them.
    pub fn load_pretrained(&self, ckpt: &Checkpoint) -> Result<LoadReport> {
        if ckpt.codebook_id != self.codebook_id {
            return Err(Error::CodebookMismatch {
                expected: self.codebook_id.clone(),
                found: ckpt.codebook_id.clone(),
            });
        }
        let mut report = LoadReport::default();
        let mut take: Vec<NamedTensor> = Vec::new();
        let mut problems = Vec::new();
        let swappable = |n: &str| n.starts_with("stem.") || n.starts_with("head.");
        for t in &ckpt.params {
            if t.name.starts_with("decoder.") {
                report.skipped.push(t.name.clone());
                continue;
            }
            match self.params.get(&t.name) {
                Some(v) if v.dims() == t.shape.as_slice() => take.push(t.clone()),
                Some(v) if swappable(&t.name) => report.reinitialized.push(format!(
                    "{} (checkpoint {:?}, model {:?})",
                    t.name,
                    t.shape,
                    v.dims()
                )),
                Some(v) => problems.push(format!("`{}` has shape {:?}, expected {:?}", t.name, t.shape, v.dims())),
                None => problems.push(format!("unexpected `{}`", t.name)),
            }
        }
        for (name, _) in self.params.iter() {
            if !ckpt.params.iter().any(|t| &t.name == name) {
                if swappable(name) {
                    report.reinitialized.push(format!("{name} (absent from checkpoint)"));
                } else {
                    problems.push(format!("missing `{name}`"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Incompatible(problems));
        }
        // a stem with some tensors loaded and others fresh would be inconsistent
        let stem_fresh = report.reinitialized.iter().any(|r| r.starts_with("stem."));
        let head_fresh = report.reinitialized.iter().any(|r| r.starts_with("head."));
        take.retain(|t| {
            let drop = (stem_fresh && t.name.starts_with("stem.")) || (head_fresh && t.name.starts_with("head."));
            if drop {
                report.reinitialized.push(format!("{} (group re-initialized)", t.name));
            }
            !drop
        });
        self.params.load(&take)?;
        report.loaded = take.into_iter().map(|t| t.name).collect();
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub reinitialized: Vec<String>,
    pub skipped: Vec<String>,
}

/// A labeled token dataset with a held-out split.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [TokenGrid],
    pub val: &'a [TokenGrid],
}

fn labels_of(grids: &[TokenGrid], num_classes: usize, what: &str) -> Result<Vec<u32>> {
    grids
        .iter()
        .enumerate()
        .map(|(i, g)| match g.label {
            Some(y) if (y as usize) < num_classes => Ok(y as u32),
            Some(y) => Err(invalid(format!("{what} sample {i} has label {y} >= {num_classes} classes"))),
            None => Err(invalid(format!("{what} sample {i} has no label"))),
        })
        .collect()
}

/// Top-1 accuracy of `model` on labeled embedding grids.
pub fn accuracy(model: &Classifier, z: &[EmbeddingGrid], labels: &[u32]) -> Result<f64> {
    if z.is_empty() || z.len() != labels.len() {
        return Err(Error::Empty("accuracy needs a non-empty, labeled set".into()));
    }
    let pred = model.predict(z)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / z.len() as f64)
}

/// Clean top-1 on labeled token grids.
pub fn evaluate(model: &Classifier, grids: &[TokenGrid], codebook: &Codebook) -> Result<f64> {
    let labels = labels_of(grids, model.config.num_classes, "eval")?;
    let z = grids.iter().map(|g| codebook.lookup(g)).collect::<Result<Vec<_>>>()?;
    accuracy(model, &z, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub kind: Option<CorruptionKind>,
    pub severity: u8,
    pub top1: f64,
}

/// Clean accuracy followed by one row per `(kind, severity)`: images are
/// corrupted in pixel space, re-tokenized and classified.
pub fn evaluate_images(
    model: &Classifier,
    images: &[Image],
    labels: &[u32],
    codebook: &Codebook,
    patch: usize,
    corruptions: &[(CorruptionKind, Vec<u8>)],
    seed: u64,
) -> Result<Vec<CorruptionRow>> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Empty("evaluation needs a non-empty, labeled image set".into()));
    }
    let score = |imgs: &[Image]| -> Result<f64> {
        let grids = tokenize_batch(imgs, codebook, patch)?;
        let z = grids.iter().map(|g| codebook.lookup(g)).collect::<Result<Vec<_>>>()?;
        accuracy(model, &z, labels)
    };
    let mut rows = vec![CorruptionRow {
        kind: None,
        severity: 0,
        top1: score(images)?,
    }];
    for (kind, severities) in corruptions {
        for &s in severities {
            let mut rng = stream(seed, 100 + s as u64);
            let bad = images.iter().map(|im| corrupt(im, *kind, s, &mut rng)).collect::<Result<Vec<_>>>()?;
            rows.push(CorruptionRow {
                kind: Some(*kind),
                severity: s,
                top1: score(&bad)?,
            });
        }
    }
    Ok(rows)
}

/// Source of training batches: maps sample indices to inputs and soft
/// targets.
pub trait BatchSource {
    fn len(&self) -> usize;
    fn batch(&self, idx: &[usize], rng: &mut Rng) -> Result<(Vec<EmbeddingGrid>, Vec<Vec<f32>>)>;
}

struct TokenSource<'a> {
    grids: &'a [TokenGrid],
    codebook: &'a Codebook,
    num_classes: usize,
    pipeline: &'a Pipeline,
    adapter: Option<&'a dyn TokenAdapter>,
}

impl BatchSource for TokenSource<'_> {
    fn len(&self) -> usize {
        self.grids.len()
    }

    fn batch(&self, idx: &[usize], rng: &mut Rng) -> Result<(Vec<EmbeddingGrid>, Vec<Vec<f32>>)> {
        let b: Vec<TokenGrid> = idx.iter().map(|&i| self.grids[i].clone()).collect();
        let out = self.pipeline.apply(&b, self.codebook, self.num_classes, self.adapter, rng)?;
        Ok((out.embeddings, out.targets))
    }
}

/// Plain labeled embedding grids without augmentation.
pub struct GridSource<'a> {
    pub grids: &'a [EmbeddingGrid],
    pub labels: &'a [u32],
    pub num_classes: usize,
}

impl BatchSource for GridSource<'_> {
    fn len(&self) -> usize {
        self.grids.len()
    }

    fn batch(&self, idx: &[usize], _rng: &mut Rng) -> Result<(Vec<EmbeddingGrid>, Vec<Vec<f32>>)> {
        let z = idx.iter().map(|&i| self.grids[i].clone()).collect();
        let t = idx
            .iter()
            .map(|&i| {
                let mut v = vec![0.0; self.num_classes];
                v[self.labels[i] as usize] = 1.0;
                v
            })
            .collect();
        Ok((z, t))
    }
}

/// Generic optimization loop. Logs `train,loss` (epoch mean) and, when an
/// evaluation closure is given, `val,top1` after each epoch.
pub fn fit(
    model: &Classifier,
    source: &dyn BatchSource,
    recipe: &TrainRecipe,
    mut eval: Option<&mut dyn FnMut(&Classifier) -> Result<f64>>,
    mut on_metric: impl FnMut(&MetricRecord),
) -> Result<Vec<MetricRecord>> {
    recipe.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::Empty("training set is empty".into()));
    }
    let bs = recipe.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let total = per_epoch * recipe.epochs;
    let sched = CosineSchedule {
        base_lr: recipe.lr,
        min_lr: recipe.min_lr.min(recipe.lr),
        warmup_steps: (recipe.warmup_epochs * per_epoch).min(total / 2),
        total_steps: total,
    };
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: recipe.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut shuffle_rng = stream(recipe.seed, 1);
    let mut aug_rng = stream(recipe.seed, 2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::new();
    let mut push = |r: MetricRecord, records: &mut Vec<MetricRecord>| {
        on_metric(&r);
        records.push(r);
    };
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for (j, idx) in order.chunks(bs).enumerate() {
            let (z, t) = source.batch(idx, &mut aug_rng)?;
            let loss = model.loss(&z, &t, recipe.label_smoothing)?;
            sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            opt.step(&loss.backward()?, sched.lr(epoch * per_epoch + j))?;
        }
        push(MetricRecord::new(epoch, "train", "loss", sum / per_epoch as f64), &mut records);
        if let Some(f) = eval.as_mut() {
            let acc = f(model)?;
            push(MetricRecord::new(epoch, "val", "top1", acc), &mut records);
        }
    }
    Ok(records)
}

/// Trains `model` on token grids through `pipeline`, scoring the held-out
/// split after every epoch.
pub fn train_model(
    model: &Classifier,
    data: Splits<'_>,
    codebook: &Codebook,
    recipe: &TrainRecipe,
    pipeline: &Pipeline,
    adapter: Option<&dyn TokenAdapter>,
    on_metric: impl FnMut(&MetricRecord),
) -> Result<Vec<MetricRecord>> {
    if model.codebook_id != codebook.id() {
        return Err(Error::CodebookMismatch {
            expected: model.codebook_id.clone(),
            found: codebook.id().to_string(),
        });
    }
    let c = model.config.num_classes;
    labels_of(data.train, c, "train")?;
    let val_labels = labels_of(data.val, c, "val")?;
    let val_z = data.val.iter().map(|g| codebook.lookup(g)).collect::<Result<Vec<_>>>()?;
    let source = TokenSource {
        grids: data.train,
        codebook,
        num_classes: c,
        pipeline,
        adapter,
    };
    let mut eval = |m: &Classifier| accuracy(m, &val_z, &val_labels);
    let eval: Option<&mut dyn FnMut(&Classifier) -> Result<f64>> = if data.val.is_empty() { None } else { Some(&mut eval) };
    fit(model, &source, recipe, eval, on_metric)
}

/// Supervised training from random initialization.
pub fn train_supervised(
    data: Splits<'_>,
    codebook: &Codebook,
    config: BackboneConfig,
    recipe: &TrainRecipe,
    pipeline: &Pipeline,
    adapter: Option<&dyn TokenAdapter>,
    on_metric: impl FnMut(&MetricRecord),
) -> Result<(Classifier, Vec<MetricRecord>)> {
    let model = Classifier::new(config, codebook.id(), DType::F32)?;
    let log = train_model(&model, data, codebook, recipe, pipeline, adapter, on_metric)?;
    Ok((model, log))
}

/// Fine-tunes from a pre-trained checkpoint (see
/// [`Classifier::load_pretrained`] for the loading rules).
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    pretrained: &Checkpoint,
    data: Splits<'_>,
    codebook: &Codebook,
    config: BackboneConfig,
    recipe: &TrainRecipe,
    pipeline: &Pipeline,
    adapter: Option<&dyn TokenAdapter>,
    on_metric: impl FnMut(&MetricRecord),
) -> Result<(Classifier, Vec<MetricRecord>, LoadReport)> {
    let model = Classifier::new(config, codebook.id(), DType::F32)?;
    let report = model.load_pretrained(pretrained)?;
    let log = train_model(&model, data, codebook, recipe, pipeline, adapter, on_metric)?;
    Ok((model, log, report))
}

/// Raw-pixel input grid: each cell holds its `patch x patch x C` pixels.
pub fn pixel_grid(image: &Image, patch: usize) -> Result<EmbeddingGrid> {
    let values = extract_patches(image, patch)?;
    let (h, w) = (image.height / patch, image.width / patch);
    let d = patch * patch * image.channels;
    EmbeddingGrid::new(h, w, d, values)
}

/// Mean and population std over all pixel-grid values, for normalization.
pub fn grid_stats(grids: &[EmbeddingGrid]) -> (f64, f64) {
    let n: usize = grids.iter().map(|g| g.values.len()).sum();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = grids.iter().flat_map(|g| &g.values).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = grids
        .iter()
        .flat_map(|g| &g.values)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    (mean, var.sqrt().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mtm::{MtmConfig, MtmModel};
    use rand::Rng as _;

    fn cb() -> Codebook {
        let mut rng = seeded(4);
        Codebook::new((0..8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(), 8, 4).unwrap()
    }

    fn tiny(cb: &Codebook, stem: StemKind) -> BackboneConfig {
        BackboneConfig {
            depth: 1,
            width: 8,
            heads: 2,
            mlp_ratio: 2.0,
            stem,
            ..BackboneConfig::for_codebook(cb, (4, 4), 3, 9)
        }
    }

    fn data(cb: &Codebook, n: usize, seed: u64) -> Vec<TokenGrid> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|i| {
                let y = (i % 3) as u16;
                let yy = y as u32;
                let idx = (0..16).map(|_| rng.random_range(0..3) + 3 * yy.min(1) + yy).collect();
                TokenGrid::new(4, 4, idx).unwrap().with_label(y)
            })
            .map(|g| {
                g.check_range(cb.k()).unwrap();
                g
            })
            .collect()
    }

    #[test]
    fn forward_contracts() {
        let cb = cb();
        let m = Classifier::new(tiny(&cb, StemKind::Conv4x4Overlap), cb.id(), DType::F32).unwrap();
        let g = data(&cb, 2, 1);
        let z: Vec<_> = g.iter().map(|t| cb.lookup(t).unwrap()).collect();
        let a: Vec<f32> = m.logits(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = m.logits(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let zz: Vec<_> = z.iter().chain(z.iter()).cloned().collect();
        let d: Vec<f32> = m.logits(&zz).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&d[..6], &a[..]);
        assert_eq!(&d[6..], &a[..]);
        let bad = EmbeddingGrid::zeros(2, 2, 4);
        assert!(m.logits(&[bad]).is_err());
        let back = Classifier::from_checkpoint(&m.checkpoint().unwrap()).unwrap();
        let c: Vec<f32> = back.logits(&z).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_epochs_and_zero_lr_keep_parameters() {
        let cb = cb();
        let g = data(&cb, 6, 2);
        let cfg = tiny(&cb, StemKind::Conv2x2);
        let init = Classifier::new(cfg.clone(), cb.id(), DType::F32).unwrap().params().export().unwrap();
        let splits = Splits { train: &g, val: &g };
        let zero = TrainRecipe {
            epochs: 0,
            ..Default::default()
        };
        let (m, log) = train_supervised(splits, &cb, cfg.clone(), &zero, &Pipeline::identity(), None, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(m.params().export().unwrap(), init);
        let ckpt = m.checkpoint().unwrap();
        let still = TrainRecipe {
            epochs: 1,
            lr: 0.0,
            min_lr: 0.0,
            batch_size: 2,
            ..Default::default()
        };
        let (f, log, rep) =
            finetune(&ckpt, splits, &cb, cfg, &still, &Pipeline::identity(), None, |_| {}).unwrap();
        assert!(rep.reinitialized.is_empty());
        assert_eq!(f.params().export().unwrap(), init);
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn loads_mtm_encoder_and_swaps_stem() {
        let cb = cb();
        let mut mc = MtmConfig::for_codebook(&cb, (4, 4), 5);
        (mc.width, mc.depth, mc.heads, mc.dec_depth, mc.mlp_ratio) = (8, 1, 2, 1, 2.0);
        let mtm = MtmModel::new(mc, cb.id(), DType::F32).unwrap();
        let ck = mtm.checkpoint().unwrap();

        let same = Classifier::new(tiny(&cb, StemKind::Conv2x2), cb.id(), DType::F32).unwrap();
        let rep = same.load_pretrained(&ck).unwrap();
        assert!(rep.loaded.iter().any(|n| n == "stem.kernel"));
        assert!(rep.skipped.iter().all(|n| n.starts_with("decoder.")));
        assert!(rep.reinitialized.iter().all(|n| n.starts_with("head.")));

        let swapped = Classifier::new(tiny(&cb, StemKind::Conv4x4Overlap), cb.id(), DType::F32).unwrap();
        let rep = swapped.load_pretrained(&ck).unwrap();
        assert!(rep.reinitialized.iter().any(|n| n.starts_with("stem.kernel")));
        assert!(rep.reinitialized.iter().any(|n| n.starts_with("stem.bias")));
        assert!(rep.loaded.iter().any(|n| n.starts_with("blocks.0.")));

        let mut wide = tiny(&cb, StemKind::Conv2x2);
        (wide.width, wide.depth) = (12, 2);
        let wide = Classifier::new(wide, cb.id(), DType::F32).unwrap();
        match wide.load_pretrained(&ck) {
            Err(Error::Incompatible(list)) => {
                assert!(list.iter().any(|m| m.contains("missing `blocks.1")));
                assert!(list.iter().any(|m| m.contains("blocks.0.norm1.gamma")));
            }
            other => panic!("expected incompatibility, got {:?}", other.map(|_| ())),
        }
        let other = Classifier::new(tiny(&cb, StemKind::Conv2x2), "0000", DType::F32).unwrap();
        assert!(matches!(other.load_pretrained(&ck), Err(Error::CodebookMismatch { .. })));
    }

    #[test]
    fn learns_separable_toy_and_is_deterministic() {
        let cb = cb();
        let tr = data(&cb, 60, 3);
        let va = data(&cb, 30, 4);
        let recipe = TrainRecipe {
            epochs: 8,
            batch_size: 10,
            lr: 3e-3,
            warmup_epochs: 1,
            ..Default::default()
        };
        let cfg = BackboneConfig {
            width: 16,
            ..tiny(&cb, StemKind::Conv2x2)
        };
        let run = || {
            train_supervised(Splits { train: &tr, val: &va }, &cb, cfg.clone(), &recipe, &Pipeline::seit(), None, |_| {})
                .unwrap()
        };
        let (m, log) = run();
        let (m2, log2) = run();
        assert_eq!(log, log2);
        assert_eq!(m.params().export().unwrap(), m2.params().export().unwrap());
        assert!(log.last().unwrap().value > 0.6, "{log:?}");
        let unlabeled = vec![TokenGrid::new(4, 4, vec![0; 16]).unwrap()];
        assert!(evaluate(&m, &unlabeled, &cb).is_err());
    }
}
