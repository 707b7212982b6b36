//! Masked token modeling: mask-ratio sampling, visible/masked splits, the
//! encoder / mask-token / decoder model and its masked-only objective.
//!
//! Masking happens on the stem's patch grid: a masked patch hides all the
//! tokens it covers, and the loss is taken over exactly those tokens.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::augment::{Pipeline, TokenAdapter};
use crate::codec::{Codebook, EmbeddingGrid, TokenGrid};
use crate::error::{invalid, shape, Error, Result};
use crate::nn::{
    cross_entropy, flops, sincos_tensor, AdamW, AdamWConfig, Block, Checkpoint, CosineSchedule, Init, LayerNorm,
    Linear, ParamStore, Stem, StemKind,
};
use crate::rng::{seeded, stream, Rng};
use crate::tokenadapt::argmax_row;

pub const MTM_MAGIC: [u8; 4] = *b"SMTM";

/// Draws from `N(mean, std^2)` truncated to `[lo, hi]` by inverse-CDF
/// sampling. `std = 0` returns `mean` clamped to the range.
pub fn sample_mask_ratio(rng: &mut Rng, mean: f64, std: f64, lo: f64, hi: f64) -> Result<f64> {
    use rand::Rng as _;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(invalid(format!("mask ratio bounds [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1")));
    }
    if !(std >= 0.0) || !mean.is_finite() {
        return Err(invalid("mask ratio needs a finite mean and std >= 0"));
    }
    if std == 0.0 {
        return Ok(mean.clamp(lo, hi));
    }
    let n = Normal::new(mean, std).map_err(|e| invalid(e.to_string()))?;
    let (a, b) = (n.cdf(lo), n.cdf(hi));
    if b - a < 1e-300 {
        return Ok(mean.clamp(lo, hi));
    }
    let u: f64 = rng.random_range(a..b);
    Ok(n.inverse_cdf(u).clamp(lo, hi))
}

/// Masked and visible position sets over `n` positions, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskSpec {
    pub fn count_for(n: usize, ratio: f64) -> usize {
        ((ratio * n as f64).round() as usize).min(n)
    }

    /// Uniformly random subset of `round(ratio * n)` masked positions.
    pub fn sample(n: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(invalid(format!("mask ratio {ratio} outside [0, 1]")));
        }
        let m = Self::count_for(n, ratio);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.partial_shuffle(rng, m);
        Self::from_masked(n, perm[..m].to_vec())
    }

    pub fn from_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&p| p >= n) {
            return Err(invalid("masked position out of range"));
        }
        let mut is_m = vec![false; n];
        masked.iter().for_each(|&p| is_m[p] = true);
        let visible = (0..n).filter(|p| !is_m[*p]).collect();
        Ok(Self { n, masked, visible })
    }

    pub fn is_masked(&self, p: usize) -> bool {
        self.masked.binary_search(&p).is_ok()
    }

    /// Maps a mask over a `ph x pw` patch grid to the `(ph*s) x (pw*s)`
    /// token grid it covers.
    pub fn expand(&self, ph: usize, pw: usize, s: usize) -> Result<Self> {
        if ph * pw != self.n {
            return Err(shape("patch grid does not match mask length"));
        }
        let w = pw * s;
        let mut masked = Vec::with_capacity(self.masked.len() * s * s);
        for &p in &self.masked {
            let (py, px) = (p / pw, p % pw);
            for dy in 0..s {
                for dx in 0..s {
                    masked.push((py * s + dy) * w + px * s + dx);
                }
            }
        }
        Self::from_masked(ph * pw * s * s, masked)
    }
}

/// Visible embeddings in position order, with their 2-D positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Visible {
    pub d: usize,
    pub values: Vec<f32>,
    pub positions: Vec<(usize, usize)>,
}

pub fn apply_mask(z: &EmbeddingGrid, ratio: f64, rng: &mut Rng) -> Result<(Visible, MaskSpec)> {
    let spec = MaskSpec::sample(z.positions(), ratio, rng)?;
    let mut values = Vec::with_capacity(spec.visible.len() * z.d);
    for &p in &spec.visible {
        values.extend_from_slice(z.cell(p));
    }
    let positions = spec.visible.iter().map(|&p| (p / z.w, p % z.w)).collect();
    Ok((Visible { d: z.d, values, positions }, spec))
}

/// Mean cross-entropy over the `masked` rows of `(n, K)` logits. Rows not
/// listed receive exactly zero gradient.
pub fn mtm_loss(logits: &Tensor, targets: &[u32], masked: &[usize]) -> Result<Tensor> {
    if masked.is_empty() {
        return Err(Error::Empty("no masked positions to score".into()));
    }
    let (n, _) = logits.dims2()?;
    if targets.len() != n || masked.iter().any(|&p| p >= n) {
        return Err(shape("targets or masked rows do not match the logits"));
    }
    let rows: Vec<u32> = masked.iter().map(|&p| p as u32).collect();
    let ids = Tensor::new(rows.as_slice(), logits.device())?;
    let picked = logits.index_select(&ids, 0)?;
    let t: Vec<u32> = masked.iter().map(|&p| targets[p]).collect();
    cross_entropy(&picked, &t)
}

/// [`mtm_loss`] on one logit grid given as plain values (f64 evaluation).
pub fn mtm_loss_grid(logits: &[f64], k: usize, grid: &TokenGrid, spec: &MaskSpec) -> Result<f64> {
    if logits.len() != grid.len() * k || spec.n != grid.len() {
        return Err(shape("logits, grid and mask disagree in size"));
    }
    if spec.masked.is_empty() {
        return Err(Error::Empty("no masked positions to score".into()));
    }
    let mut total = 0.0;
    for &p in &spec.masked {
        let row = &logits[p * k..(p + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[grid.indices[p] as usize];
    }
    Ok(total / spec.masked.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtmConfig {
    pub d: usize,
    pub k: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dec_depth: usize,
    pub emb_mean: f64,
    pub emb_std: f64,
    pub seed: u64,
}

impl MtmConfig {
    pub fn for_codebook(codebook: &Codebook, grid: (usize, usize), seed: u64) -> Self {
        let ta = crate::tokenadapt::TokenAdaptConfig::for_codebook(codebook, 1, seed);
        Self {
            d: codebook.d(),
            k: codebook.k(),
            grid_h: grid.0,
            grid_w: grid.1,
            width: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
            dec_depth: 2,
            emb_mean: ta.emb_mean,
            emb_std: ta.emb_std,
            seed,
        }
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        StemKind::Conv2x2.output_grid(self.grid_h, self.grid_w)
    }

    fn validate(&self) -> Result<()> {
        if self.grid_h % 2 != 0 || self.grid_w % 2 != 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(invalid("masked token modeling needs even, positive grid sides"));
        }
        if self.width % 4 != 0 || self.depth == 0 || self.dec_depth == 0 {
            return Err(invalid("width must be a multiple of 4, depths positive"));
        }
        if !(self.emb_std > 0.0) {
            return Err(invalid("emb_std must be positive"));
        }
        Ok(())
    }
}

pub struct MtmModel {
    config: MtmConfig,
    codebook_id: String,
    params: ParamStore,
    stem: Stem,
    blocks: Vec<Block>,
    norm: LayerNorm,
    mask_token: Tensor,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    head: Linear,
    /// Head rows `(b, patch, sub)` to token rows `(b, y, x)`.
    token_order: Vec<u32>,
}

impl MtmModel {
    pub fn new(config: MtmConfig, codebook_id: &str, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut ps = ParamStore::new(dtype);
        let c = &config;
        let stem = Stem::new(&mut ps, "stem", StemKind::Conv2x2, c.d, c.width, &mut rng)?;
        let blocks = (0..c.depth)
            .map(|i| Block::new(&mut ps, &format!("blocks.{i}"), c.width, c.heads, c.mlp_ratio, false, &mut rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut ps, "norm", c.width, &mut rng)?;
        let mask_token = ps.init("decoder.mask_token", &[1, c.width], Init::TruncNormal(0.02), &mut rng)?;
        let dec_blocks = (0..c.dec_depth)
            .map(|i| Block::new(&mut ps, &format!("decoder.blocks.{i}"), c.width, c.heads, c.mlp_ratio, false, &mut rng))
            .collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(&mut ps, "decoder.norm", c.width, &mut rng)?;
        let head = Linear::new(&mut ps, "decoder.head", c.width, 4 * c.k, &mut rng)?;
        let (ph, pw) = config.patch_grid();
        let mut token_order = Vec::with_capacity(c.grid_h * c.grid_w);
        for y in 0..c.grid_h {
            for x in 0..c.grid_w {
                token_order.push((((y / 2) * pw + x / 2) * 4 + (y % 2) * 2 + x % 2) as u32);
            }
        }
        debug_assert_eq!(token_order.len(), ph * pw * 4);
        Ok(Self {
            config,
            codebook_id: codebook_id.to_string(),
            params: ps,
            stem,
            blocks,
            norm,
            mask_token,
            dec_blocks,
            dec_norm,
            head,
            token_order,
        })
    }

    pub fn config(&self) -> &MtmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn codebook_id(&self) -> &str {
        &self.codebook_id
    }

    pub fn num_patches(&self) -> usize {
        let (ph, pw) = self.config.patch_grid();
        ph * pw
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Normalized `(B, h, w, d)` tensor.
    pub fn input_tensor(&self, z: &[EmbeddingGrid]) -> Result<Tensor> {
        let c = &self.config;
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
        Ok(((t - c.emb_mean)? / c.emb_std)?.to_dtype(self.dtype())?)
    }

    /// Patch tokens with positional encoding, `(B, P, width)`.
    pub fn embed_patches(&self, z: &[EmbeddingGrid]) -> Result<Tensor> {
        let (ph, pw) = self.config.patch_grid();
        let pe = sincos_tensor(ph, pw, self.config.width, self.dtype())?;
        Ok(self.stem.forward(&self.input_tensor(z)?)?.broadcast_add(&pe)?)
    }

    /// Runs the encoder on the visible patches only. `visible[b]` lists
    /// sample `b`'s visible patch positions in any order; every sample must
    /// expose the same count. Returns `(B, V, width)` or `None` if `V = 0`.
    pub fn encode(&self, patches: &Tensor, visible: &[Vec<usize>]) -> Result<Option<Tensor>> {
        let (b, p, w) = patches.dims3()?;
        if visible.len() != b {
            return Err(shape("one visible list per sample required"));
        }
        let v = visible[0].len();
        if visible.iter().any(|l| l.len() != v || l.iter().any(|&q| q >= p)) {
            return Err(shape("visible lists must share length and stay in range"));
        }
        if v == 0 {
            return Ok(None);
        }
        let ids: Vec<u32> = visible
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&q| (i * p + q) as u32))
            .collect();
        let ids = Tensor::new(ids.as_slice(), &Device::Cpu)?;
        let mut x = patches.reshape((b * p, w))?.index_select(&ids, 0)?.reshape((b, v, w))?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        Ok(Some(self.norm.forward(&x)?))
    }

    /// Pads latents back to the full patch sequence with the mask token and
    /// runs the decoder trunk. Returns normalized `(B * P, width)` features.
    fn decode_features(&self, latents: Option<&Tensor>, visible: &[Vec<usize>], b: usize) -> Result<Tensor> {
        let c = &self.config;
        let p = self.num_patches();
        let v = visible.first().map_or(0, |l| l.len());
        let mask_row = (b * v) as u32;
        let mut restore = vec![mask_row; b * p];
        for (i, l) in visible.iter().enumerate() {
            for (j, &q) in l.iter().enumerate() {
                restore[i * p + q] = (i * v + j) as u32;
            }
        }
        let pool = match latents {
            Some(l) => Tensor::cat(&[&l.reshape((b * v, c.width))?, &self.mask_token], 0)?,
            None => self.mask_token.clone(),
        };
        let ids = Tensor::new(restore.as_slice(), &Device::Cpu)?;
        let (ph, pw) = c.patch_grid();
        let pe = sincos_tensor(ph, pw, c.width, self.dtype())?;
        let mut x = pool.index_select(&ids, 0)?.reshape((b, p, c.width))?.broadcast_add(&pe)?;
        for blk in &self.dec_blocks {
            x = blk.forward(&x)?;
        }
        Ok(self.dec_norm.forward(&x)?.reshape((b * p, c.width))?)
    }

    /// Decodes to `(B * h * w, K)` logits in token order.
    pub fn decode(&self, latents: Option<&Tensor>, visible: &[Vec<usize>], b: usize) -> Result<Tensor> {
        let c = &self.config;
        let p = self.num_patches();
        let feats = self.decode_features(latents, visible, b)?;
        let logits = self.head.forward(&feats)?.reshape((b * p * 4, c.k))?;
        let order: Vec<u32> = (0..b)
            .flat_map(|i| self.token_order.iter().map(move |&r| r + (i * p * 4) as u32))
            .collect();
        Ok(logits.index_select(&Tensor::new(order.as_slice(), &Device::Cpu)?, 0)?)
    }

    /// Full forward for patch-level masks. Returns `(B * h * w, K)` logits.
    pub fn forward(&self, z: &[EmbeddingGrid], masks: &[MaskSpec]) -> Result<Tensor> {
        if masks.len() != z.len() || masks.iter().any(|m| m.n != self.num_patches()) {
            return Err(shape("one patch-level mask per sample required"));
        }
        let patches = self.embed_patches(z)?;
        let visible: Vec<Vec<usize>> = masks.iter().map(|m| m.visible.clone()).collect();
        let lat = self.encode(&patches, &visible)?;
        self.decode(lat.as_ref(), &visible, z.len())
    }

    /// Encoder FLOPs for one forward at the given masks.
    pub fn encoder_flops(&self, z: &[EmbeddingGrid], masks: &[MaskSpec]) -> Result<u64> {
        let patches = self.embed_patches(z)?;
        let visible: Vec<Vec<usize>> = masks.iter().map(|m| m.visible.clone()).collect();
        let (r, f) = flops::measure(|| self.encode(&patches, &visible));
        r?;
        Ok(f)
    }

    /// Token-level masked rows (over the whole batch) for patch masks.
    pub fn masked_token_rows(&self, masks: &[MaskSpec]) -> Result<Vec<usize>> {
        let (ph, pw) = self.config.patch_grid();
        let n = self.config.grid_h * self.config.grid_w;
        let mut rows = Vec::new();
        for (i, m) in masks.iter().enumerate() {
            rows.extend(m.expand(ph, pw, 2)?.masked.iter().map(|&p| i * n + p));
        }
        Ok(rows)
    }

    /// Masked-token loss. Only masked patches go through the head; the value
    /// equals [`mtm_loss`] over [`MtmModel::forward`] logits.
    pub fn loss(&self, z: &[EmbeddingGrid], targets: &[TokenGrid], masks: &[MaskSpec]) -> Result<Tensor> {
        if masks.len() != z.len() || targets.len() != z.len() || masks.iter().any(|m| m.n != self.num_patches()) {
            return Err(shape("one target grid and patch-level mask per sample required"));
        }
        let c = &self.config;
        let (p, pw) = (self.num_patches(), c.patch_grid().1);
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for (i, (m, g)) in masks.iter().zip(targets).enumerate() {
            for &q in &m.masked {
                rows.push((i * p + q) as u32);
                let (py, px) = (q / pw, q % pw);
                for sub in 0..4 {
                    t.push(g.indices[(py * 2 + sub / 2) * c.grid_w + px * 2 + sub % 2]);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::Empty("no masked positions to score".into()));
        }
        let patches = self.embed_patches(z)?;
        let visible: Vec<Vec<usize>> = masks.iter().map(|m| m.visible.clone()).collect();
        let lat = self.encode(&patches, &visible)?;
        let feats = self.decode_features(lat.as_ref(), &visible, z.len())?;
        let picked = feats.index_select(&Tensor::new(rows.as_slice(), &Device::Cpu)?, 0)?;
        let logits = self.head.forward(&picked)?.reshape((rows.len() * 4, c.k))?;
        cross_entropy(&logits, &t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            magic: MTM_MAGIC,
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
        Self::from_checkpoint(&Checkpoint::load(path, &MTM_MAGIC)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub ratio_mean: f64,
    pub ratio_std: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            lr: 1.5e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 2,
            ratio_mean: 0.7,
            ratio_std: 0.25,
            ratio_lo: 0.4,
            ratio_hi: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtmRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub ratio_mean: f64,
}

impl MtmRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.loss, self.ratio_mean)
    }

    pub fn write_csv<W: Write>(records: &[MtmRecord], mut w: W) -> std::io::Result<()> {
        for r in records {
            writeln!(w, "{}", r.csv_line())?;
        }
        Ok(())
    }
}

/// Optional token-space augmentation during pre-training (geometric
/// TokenAdapt only).
pub struct MtmAugment<'a> {
    pub pipeline: &'a Pipeline,
    pub adapter: &'a dyn TokenAdapter,
}

/// Runs the masked token modeling loop and returns the trained model.
pub fn pretrain(
    tokens: &[TokenGrid],
    codebook: &Codebook,
    config: MtmConfig,
    hyper: &PretrainConfig,
    augment: Option<MtmAugment<'_>>,
    mut on_record: impl FnMut(&MtmRecord),
) -> Result<(MtmModel, Vec<MtmRecord>)> {
    if tokens.is_empty() {
        return Err(Error::Empty("pre-training set has no grids".into()));
    }
    if config.d != codebook.d() || config.k != codebook.k() {
        return Err(Error::Incompatible(vec![format!(
            "model expects K={} d={}, codebook has K={} d={}",
            config.k,
            config.d,
            codebook.k(),
            codebook.d()
        )]));
    }
    for (i, g) in tokens.iter().enumerate() {
        if (g.h, g.w) != (config.grid_h, config.grid_w) {
            return Err(shape(format!("grid {i} is {}x{}, model expects {}x{}", g.h, g.w, config.grid_h, config.grid_w)));
        }
        g.check_range(codebook.k())?;
    }
    if hyper.batch_size == 0 || !(hyper.lr >= 0.0) {
        return Err(invalid("pre-training needs batch_size > 0 and lr >= 0"));
    }
    sample_mask_ratio(&mut seeded(0), hyper.ratio_mean, hyper.ratio_std, hyper.ratio_lo, hyper.ratio_hi)?;
    let model = MtmModel::new(config, codebook.id(), DType::F32)?;
    let n = tokens.len();
    let bs = hyper.batch_size.min(n);
    let per_epoch = n.div_ceil(bs);
    let total = per_epoch * hyper.epochs;
    let sched = CosineSchedule {
        base_lr: hyper.lr,
        min_lr: hyper.min_lr.min(hyper.lr),
        warmup_steps: (hyper.warmup_epochs * per_epoch).min(total / 2),
        total_steps: total,
    };
    let mut opt = AdamW::new(
        model.params(),
        AdamWConfig {
            weight_decay: hyper.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut shuffle_rng = stream(hyper.seed, 1);
    let mut mask_rng = stream(hyper.seed, 2);
    let mut aug_rng = stream(hyper.seed, 3);
    let mut order: Vec<usize> = (0..n).collect();
    let p = model.num_patches();
    let mut records = Vec::with_capacity(total);
    for step in 0..total {
        let epoch = step / per_epoch;
        let pos = step % per_epoch;
        if pos == 0 {
            order.shuffle(&mut shuffle_rng);
        }
        let batch: Vec<TokenGrid> = order[pos * bs..((pos + 1) * bs).min(n)]
            .iter()
            .map(|&i| tokens[i].clone())
            .collect();
        let batch = match &augment {
            Some(a) => a.pipeline.apply_tokens(&batch, codebook, Some(a.adapter), &mut aug_rng)?,
            None => batch,
        };
        let ratio = sample_mask_ratio(&mut mask_rng, hyper.ratio_mean, hyper.ratio_std, hyper.ratio_lo, hyper.ratio_hi)?;
        let masks = (0..batch.len())
            .map(|_| MaskSpec::sample(p, ratio, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let z = batch.iter().map(|g| codebook.lookup(g)).collect::<Result<Vec<_>>>()?;
        let loss = model.loss(&z, &batch, &masks)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        opt.step(&loss.backward()?, sched.lr(step))?;
        let rec = MtmRecord {
            epoch,
            step,
            loss: value,
            ratio_mean: ratio,
        };
        on_record(&rec);
        records.push(rec);
    }
    Ok((model, records))
}

/// Top-1 accuracy of masked-token prediction at a fixed ratio.
pub fn masked_accuracy(model: &MtmModel, tokens: &[TokenGrid], codebook: &Codebook, ratio: f64, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 4);
    let p = model.num_patches();
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in tokens.chunks(128) {
        let masks = (0..chunk.len())
            .map(|_| MaskSpec::sample(p, ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let z = chunk.iter().map(|g| codebook.lookup(g)).collect::<Result<Vec<_>>>()?;
        let logits: Vec<f32> = model.forward(&z, &masks)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let k = model.config.k;
        let n = model.config.grid_h * model.config.grid_w;
        for r in model.masked_token_rows(&masks)? {
            let target = chunk[r / n].indices[r % n];
            hit += (argmax_row(&logits[r * k..(r + 1) * k]) == target) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no masked positions to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tiny(dtype: DType) -> (MtmModel, Codebook) {
        let mut rng = seeded(1);
        let cb = Codebook::new((0..8 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(), 8, 4).unwrap();
        let mut cfg = MtmConfig::for_codebook(&cb, (4, 4), 3);
        cfg.width = 8;
        cfg.depth = 2;
        cfg.heads = 2;
        cfg.dec_depth = 1;
        cfg.mlp_ratio = 2.0;
        (MtmModel::new(cfg, cb.id(), dtype).unwrap(), cb)
    }

    fn grids(cb: &Codebook, n: usize, seed: u64) -> Vec<TokenGrid> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| TokenGrid::new(4, 4, (0..16).map(|_| rng.random_range(0..cb.k() as u32)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn ratio_sampling() {
        let mut rng = seeded(0);
        assert_eq!(sample_mask_ratio(&mut rng, 0.2, 0.0, 0.4, 1.0).unwrap(), 0.4);
        assert_eq!(sample_mask_ratio(&mut rng, 0.7, 0.0, 0.4, 1.0).unwrap(), 0.7);
        for _ in 0..10000 {
            let r = sample_mask_ratio(&mut rng, 0.7, 0.25, 0.4, 1.0).unwrap();
            assert!((0.4..=1.0).contains(&r));
        }
        assert!(sample_mask_ratio(&mut rng, 0.7, 0.25, 0.6, 0.5).is_err());
        assert!(sample_mask_ratio(&mut rng, 0.7, -1.0, 0.4, 1.0).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut rng = seeded(2);
        let z = EmbeddingGrid::zeros(4, 4, 2);
        let (v, s) = apply_mask(&z, 0.0, &mut rng).unwrap();
        assert_eq!((v.positions.len(), s.masked.len()), (16, 0));
        let (v, s) = apply_mask(&z, 1.0, &mut rng).unwrap();
        assert_eq!((v.positions.len(), s.masked.len()), (0, 16));
        let (v, s) = apply_mask(&z, 0.5, &mut rng).unwrap();
        assert_eq!((v.positions.len(), s.masked.len()), (8, 8));
        assert!(s.masked.iter().all(|p| !s.visible.contains(p)));
        let e = MaskSpec::from_masked(4, vec![3]).unwrap().expand(2, 2, 2).unwrap();
        assert_eq!(e.masked, vec![10, 11, 14, 15]);
    }

    #[test]
    fn loss_contracts() {
        let k = 8;
        let g = TokenGrid::new(2, 2, vec![0, 3, 5, 7]).unwrap();
        let spec = MaskSpec::from_masked(4, vec![1, 2]).unwrap();
        let uniform = vec![0.0; 4 * k];
        assert!((mtm_loss_grid(&uniform, k, &g, &spec).unwrap() - (k as f64).ln()).abs() < 1e-12);
        let mut perturbed = uniform.clone();
        perturbed[0] = 5.0;
        assert_eq!(
            mtm_loss_grid(&perturbed, k, &g, &spec).unwrap(),
            mtm_loss_grid(&uniform, k, &g, &spec).unwrap()
        );
        assert!(mtm_loss_grid(&uniform, k, &g, &MaskSpec::from_masked(4, vec![]).unwrap()).is_err());
    }

    #[test]
    fn zero_ratio_has_no_mask_tokens_and_full_ratio_runs() {
        let (m, cb) = tiny(DType::F32);
        let g = grids(&cb, 2, 5);
        let z: Vec<_> = g.iter().map(|t| cb.lookup(t).unwrap()).collect();
        let none = vec![MaskSpec::from_masked(4, vec![]).unwrap(); 2];
        assert_eq!(m.forward(&z, &none).unwrap().dims(), &[32, 8]);
        let all = vec![MaskSpec::from_masked(4, vec![0, 1, 2, 3]).unwrap(); 2];
        assert_eq!(m.forward(&z, &all).unwrap().dims(), &[32, 8]);
        assert!(m.loss(&z, &g, &none).is_err());
    }

    #[test]
    fn fast_loss_matches_full_logits() {
        let (m, cb) = tiny(DType::F64);
        let g = grids(&cb, 3, 8);
        let z: Vec<_> = g.iter().map(|t| cb.lookup(t).unwrap()).collect();
        let mut rng = seeded(1);
        let masks: Vec<_> = (0..3).map(|_| MaskSpec::sample(4, 0.5, &mut rng).unwrap()).collect();
        let t: Vec<u32> = g.iter().flat_map(|x| x.indices.clone()).collect();
        let full = mtm_loss(&m.forward(&z, &masks).unwrap(), &t, &m.masked_token_rows(&masks).unwrap()).unwrap();
        let fast = m.loss(&z, &g, &masks).unwrap();
        let (a, b) = (full.to_scalar::<f64>().unwrap(), fast.to_scalar::<f64>().unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn encoder_cost_tracks_visible_count() {
        let (m, cb) = tiny(DType::F32);
        let g = grids(&cb, 2, 6);
        let z: Vec<_> = g.iter().map(|t| cb.lookup(t).unwrap()).collect();
        let mut rng = seeded(0);
        let lo: Vec<_> = (0..2).map(|_| MaskSpec::sample(4, 0.25, &mut rng).unwrap()).collect();
        let hi: Vec<_> = (0..2).map(|_| MaskSpec::sample(4, 0.75, &mut rng).unwrap()).collect();
        assert!(m.encoder_flops(&z, &hi).unwrap() < m.encoder_flops(&z, &lo).unwrap());
    }

    #[test]
    fn pretrain_smoke_and_determinism() {
        let (m, cb) = tiny(DType::F32);
        let g = grids(&cb, 12, 7);
        let hyper = PretrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (a, la) = pretrain(&g, &cb, m.config().clone(), &hyper, None, |_| {}).unwrap();
        let (b, lb) = pretrain(&g, &cb, m.config().clone(), &hyper, None, |_| {}).unwrap();
        assert_eq!(la.len(), 6);
        assert_eq!(la, lb);
        assert_eq!(a.params().export().unwrap(), b.params().export().unwrap());
        let ck = a.checkpoint().unwrap();
        let back = MtmModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params().export().unwrap(), a.params().export().unwrap());
        assert!(pretrain(&[], &cb, m.config().clone(), &hyper, None, |_| {}).is_err());
    }
}
