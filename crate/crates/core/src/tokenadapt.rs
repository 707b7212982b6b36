//! Learned conversion `f` into an augmentation-compatible space and reverse
//! map `g` back to per-position codebook logits.
//!
//! Both maps are one transformer block with zero-initialized output
//! projections, so a fresh module is the identity: applying an augmentation
//! through it equals applying the augmentation to the embedding grid and
//! re-quantizing. Logits are scaled negative squared distances to the
//! (normalized) codewords.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugSpec, PixelOp, SampledAug, TokenAdapter};
use crate::codec::{tokenize_batch, Codebook, EmbeddingGrid, TokenGrid};
use crate::error::{invalid, shape, Error, Result};
use crate::image::Image;
use crate::nn::{cross_entropy, sincos_tensor, AdamW, AdamWConfig, Block, Checkpoint, CosineSchedule, Init, ParamStore};
use crate::rng::{seeded, stream, Rng};

pub const TOKENADAPT_MAGIC: [u8; 4] = *b"STAM";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenAdaptConfig {
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    /// Global mean and std of codebook entries, used to normalize inputs.
    pub emb_mean: f64,
    pub emb_std: f64,
    pub init_temperature: f64,
}

impl TokenAdaptConfig {
    pub fn for_codebook(codebook: &Codebook, heads: usize, seed: u64) -> Self {
        let e = codebook.entries();
        let n = e.len() as f64;
        let mean = e.iter().map(|v| *v as f64).sum::<f64>() / n;
        let std = (e.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            d: codebook.d(),
            k: codebook.k(),
            heads,
            mlp_ratio: 2.0,
            seed,
            emb_mean: mean,
            emb_std: if std > 0.0 { std } else { 1.0 },
            init_temperature: 0.5,
        }
    }
}

/// Per-position logits over the codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub values: Vec<f32>,
}

impl LogitGrid {
    /// Lowest index wins ties.
    pub fn argmax(&self) -> TokenGrid {
        let idx = self.values.chunks_exact(self.k).map(argmax_row).collect();
        TokenGrid::new(self.h, self.w, idx).expect("shape preserved")
    }

    pub fn softmax_row(&self, pos: usize) -> Vec<f64> {
        let row = &self.values[pos * self.k..(pos + 1) * self.k];
        let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
        let e: Vec<f64> = row.iter().map(|v| (*v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }
}

pub(crate) fn argmax_row(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub struct TokenAdaptModule {
    config: TokenAdaptConfig,
    codebook_id: String,
    params: ParamStore,
    f: Block,
    g: Block,
    log_tau: Tensor,
    codes_t: Tensor,
    code_sq: Tensor,
}

impl TokenAdaptModule {
    pub fn new(config: TokenAdaptConfig, codebook: &Codebook, dtype: DType) -> Result<Self> {
        if config.d != codebook.d() || config.k != codebook.k() {
            return Err(shape(format!(
                "module expects K={} d={}, codebook has K={} d={}",
                config.k,
                config.d,
                codebook.k(),
                codebook.d()
            )));
        }
        if !(config.emb_std > 0.0 && config.init_temperature > 0.0) {
            return Err(invalid("emb_std and init_temperature must be positive"));
        }
        let mut rng = seeded(config.seed);
        let mut ps = ParamStore::new(dtype);
        let f = Block::new(&mut ps, "f", config.d, config.heads, config.mlp_ratio, true, &mut rng)?;
        let g = Block::new(&mut ps, "g", config.d, config.heads, config.mlp_ratio, true, &mut rng)?;
        let log_tau = ps.init("log_tau", &[1], Init::Zeros, &mut rng)?;
        let init = Tensor::new(&[config.init_temperature.ln()], &Device::Cpu)?.to_dtype(dtype)?;
        ps.get("log_tau").unwrap().set(&init)?;
        let codes = Tensor::from_slice(codebook.entries(), (config.k, config.d), &Device::Cpu)?.to_dtype(DType::F64)?;
        let codes = ((codes - config.emb_mean)? / config.emb_std)?;
        let code_sq = codes.sqr()?.sum(1)?.to_dtype(dtype)?;
        let codes_t = codes.t()?.contiguous()?.to_dtype(dtype)?;
        Ok(Self {
            config,
            codebook_id: codebook.id().to_string(),
            params: ps,
            f,
            g,
            log_tau,
            codes_t,
            code_sq,
        })
    }

    pub fn config(&self) -> &TokenAdaptConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn check_grid(&self, h: usize, w: usize, d: usize) -> Result<()> {
        if d != self.config.d {
            return Err(shape(format!("module width {} vs grid channels {d}", self.config.d)));
        }
        if h == 0 || w == 0 {
            return Err(shape("empty grid"));
        }
        Ok(())
    }

    /// Stacks grids into a normalized `(B, n, d)` tensor.
    pub fn batch_tensor(&self, z: &[EmbeddingGrid]) -> Result<(Tensor, usize, usize)> {
        let first = z.first().ok_or_else(|| invalid("empty batch"))?;
        let (h, w, d) = (first.h, first.w, first.d);
        self.check_grid(h, w, d)?;
        let mut data = Vec::with_capacity(z.len() * h * w * d);
        for g in z {
            if (g.h, g.w, g.d) != (h, w, d) {
                return Err(shape("all grids in a batch must share shape"));
            }
            data.extend_from_slice(&g.values);
        }
        let t = Tensor::from_vec(data, (z.len(), h * w, d), &Device::Cpu)?.to_dtype(DType::F64)?;
        let t = ((t - self.config.emb_mean)? / self.config.emb_std)?;
        Ok((t.to_dtype(self.dtype())?, h, w))
    }

    fn pe(&self, h: usize, w: usize) -> Result<Tensor> {
        sincos_tensor(h, w, self.config.d, self.dtype())
    }

    /// `S = f(Z)` on a normalized `(B, n, d)` batch.
    pub fn f_forward(&self, zn: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let pe = self.pe(h, w)?;
        Ok(self.f.forward(&zn.broadcast_add(&pe)?)?.broadcast_sub(&pe)?)
    }

    /// `(B * n, K)` logits from an S-space batch.
    pub fn g_logits(&self, s: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let pe = self.pe(h, w)?;
        let e = self.g.forward(&s.broadcast_add(&pe)?)?.broadcast_sub(&pe)?;
        let (b, n, d) = e.dims3()?;
        let e = e.reshape((b * n, d))?;
        crate::nn::flops::add(2 * (b * n * d * self.config.k) as u64);
        let logits = ((e.matmul(&self.codes_t)? * 2.0)?).broadcast_sub(&self.code_sq)?;
        Ok(logits.broadcast_mul(&self.log_tau.exp()?)?)
    }

    /// Applies each sample's augmentation in S-space. `augs[i]` pairs sample
    /// `i` with sample `B - 1 - i` when it mixes.
    fn mix(&self, s: &Tensor, h: usize, w: usize, rows: &[usize], augs: &[SampledAug]) -> Result<Tensor> {
        let (b, n, _) = s.dims3()?;
        let j = rows.len();
        let mut ma = Vec::with_capacity(j * n * n);
        let mut mb = Vec::with_capacity(j * n * n);
        let mut any_b = false;
        for aug in augs {
            let (a, bm) = aug.mixing_matrices(h, w)?;
            ma.extend_from_slice(&a);
            match bm {
                Some(bm) => {
                    any_b = true;
                    mb.extend_from_slice(&bm);
                }
                None => mb.extend(std::iter::repeat_n(0.0f32, n * n)),
            }
        }
        let dev = Device::Cpu;
        let ids: Vec<u32> = rows.iter().map(|&i| i as u32).collect();
        let pids: Vec<u32> = rows.iter().map(|&i| (b - 1 - i) as u32).collect();
        let primary = s.index_select(&Tensor::new(ids.as_slice(), &dev)?, 0)?;
        let ma = Tensor::from_vec(ma, (j, n, n), &dev)?.to_dtype(self.dtype())?;
        let mut out = ma.matmul(&primary)?;
        if any_b {
            let partner = s.index_select(&Tensor::new(pids.as_slice(), &dev)?, 0)?;
            let mb = Tensor::from_vec(mb, (j, n, n), &dev)?.to_dtype(self.dtype())?;
            out = (out + mb.matmul(&partner)?)?;
        }
        Ok(out)
    }

    /// Logits of `g(A(f(Z)))` for every sample (`augs.len() == z.len()`).
    pub fn augmented_logits(&self, z: &[EmbeddingGrid], augs: &[SampledAug]) -> Result<Tensor> {
        if augs.len() != z.len() {
            return Err(shape("one augmentation per sample required"));
        }
        let (zn, h, w) = self.batch_tensor(z)?;
        let s = self.f_forward(&zn, h, w)?;
        let rows: Vec<usize> = (0..z.len()).collect();
        let sa = self.mix(&s, h, w, &rows, augs)?;
        self.g_logits(&sa, h, w)
    }

    /// Mean cross-entropy against target tokens over all positions.
    pub fn loss(&self, z: &[EmbeddingGrid], augs: &[SampledAug], targets: &[TokenGrid]) -> Result<Tensor> {
        let logits = self.augmented_logits(z, augs)?;
        let ids: Vec<u32> = targets.iter().flat_map(|t| t.indices.iter().copied()).collect();
        cross_entropy(&logits, &ids)
    }

    /// `S_T = f(Z_T)` for one grid (normalized units).
    pub fn convert(&self, z: &EmbeddingGrid) -> Result<EmbeddingGrid> {
        let (zn, h, w) = self.batch_tensor(std::slice::from_ref(z))?;
        let s = self.f_forward(&zn, h, w)?;
        let values = s.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        EmbeddingGrid::new(h, w, self.config.d, values)
    }

    /// Logits of `g(S)` for one S-space grid.
    pub fn reverse(&self, s: &EmbeddingGrid) -> Result<LogitGrid> {
        self.check_grid(s.h, s.w, s.d)?;
        let t = Tensor::from_slice(&s.values, (1, s.positions(), s.d), &Device::Cpu)?.to_dtype(self.dtype())?;
        let logits = self.g_logits(&t, s.h, s.w)?;
        Ok(LogitGrid {
            h: s.h,
            w: s.w,
            k: self.config.k,
            values: logits.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
        })
    }

    fn tokens_from_logits(&self, logits: &Tensor, h: usize, w: usize) -> Result<Vec<TokenGrid>> {
        let flat: Vec<f32> = logits.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let per = h * w * self.config.k;
        Ok(flat
            .chunks_exact(per)
            .map(|c| {
                LogitGrid {
                    h,
                    w,
                    k: self.config.k,
                    values: c.to_vec(),
                }
                .argmax()
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            magic: TOKENADAPT_MAGIC,
            config: serde_json::to_value(&self.config).map_err(|e| invalid(e.to_string()))?,
            codebook_id: self.codebook_id.clone(),
            params: self.params.export()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, codebook: &Codebook) -> Result<Self> {
        if ckpt.codebook_id != codebook.id() {
            return Err(Error::CodebookMismatch {
                expected: codebook.id().to_string(),
                found: ckpt.codebook_id.clone(),
            });
        }
        let m = Self::new(ckpt.config_as()?, codebook, DType::F32)?;
        m.params.load_exact(&ckpt.params)?;
        Ok(m)
    }

    /// Loads a module, rejecting it unless it was trained on `codebook`.
    pub fn load(path: &Path, codebook: &Codebook) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, &TOKENADAPT_MAGIC)?, codebook)
    }
}

impl TokenAdapter for TokenAdaptModule {
    fn codebook_id(&self) -> &str {
        &self.codebook_id
    }

    fn adapt(&self, z: &[EmbeddingGrid], jobs: &[(usize, SampledAug)]) -> Result<Vec<TokenGrid>> {
        if jobs.is_empty() {
            return Ok(Vec::new());
        }
        let (zn, h, w) = self.batch_tensor(z)?;
        let s = self.f_forward(&zn, h, w)?;
        let rows: Vec<usize> = jobs.iter().map(|(i, _)| *i).collect();
        if rows.iter().any(|&i| i >= z.len()) {
            return Err(invalid("augmentation job index out of range"));
        }
        let augs: Vec<SampledAug> = jobs.iter().map(|(_, a)| a.clone()).collect();
        let sa = self.mix(&s, h, w, &rows, &augs)?;
        self.tokens_from_logits(&self.g_logits(&sa, h, w)?, h, w)
    }
}

/// `q(g(A(f(lookup(T)))))` for a single grid. Mixing operators need a
/// `partner` grid.
pub fn apply_token_adapt(
    grid: &TokenGrid,
    spec: &AugSpec,
    partner: Option<&TokenGrid>,
    module: &TokenAdaptModule,
    codebook: &Codebook,
    rng: &mut Rng,
) -> Result<TokenGrid> {
    let op = spec.pixel_op()?;
    if !op.is_token_compatible() {
        return Err(invalid(format!("`{}` has no action in token space", spec.op)));
    }
    let aug = op.sample((grid.h, grid.w), rng);
    apply_sampled(grid, &aug, partner, module, codebook)
}

pub fn apply_sampled(
    grid: &TokenGrid,
    aug: &SampledAug,
    partner: Option<&TokenGrid>,
    module: &TokenAdaptModule,
    codebook: &Codebook,
) -> Result<TokenGrid> {
    if module.codebook_id != codebook.id() {
        return Err(Error::CodebookMismatch {
            expected: codebook.id().to_string(),
            found: module.codebook_id.clone(),
        });
    }
    let mut z = vec![codebook.lookup(grid)?];
    if aug.needs_partner() {
        let p = partner.ok_or_else(|| invalid("mixing augmentation needs a partner grid"))?;
        z.push(codebook.lookup(p)?);
    }
    let mut out = module.adapt(&z, &[(0, aug.clone())])?.remove(0);
    out.label = grid.label;
    Ok(out)
}

/// Token-space result of the augmentation without a learned module:
/// augment the embedding grid directly and re-quantize.
pub fn naive_token_aug(
    grid: &TokenGrid,
    aug: &SampledAug,
    partner: Option<&TokenGrid>,
    codebook: &Codebook,
) -> Result<TokenGrid> {
    let z = codebook.lookup(grid)?;
    let p = partner.map(|p| codebook.lookup(p)).transpose()?;
    codebook.quantize(&aug.apply_features(&z, p.as_ref())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenAdaptTrainConfig {
    /// Passes over the pair source (fractional values allowed).
    pub epochs: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub init_temperature: f64,
    pub seed: u64,
}

impl Default for TokenAdaptTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1.0,
            batch_size: 128,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_steps: 5,
            heads: 4,
            mlp_ratio: 2.0,
            init_temperature: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

impl LossRecord {
    pub fn write_csv<W: Write>(records: &[LossRecord], mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,step,loss")?;
        for r in records {
            writeln!(w, "{},{},{}", r.epoch, r.step, r.loss)?;
        }
        Ok(())
    }
}

/// Samples one augmentation per batch element, pairing element `i` with
/// element `B - 1 - i`, and builds `(x, A(x))` token pairs.
pub fn make_pairs(
    images: &[&Image],
    source_tokens: &[&TokenGrid],
    ops: &[PixelOp],
    codebook: &Codebook,
    patch_size: usize,
    rng: &mut Rng,
) -> Result<(Vec<SampledAug>, Vec<TokenGrid>)> {
    use rand::Rng as _;
    let b = images.len();
    let (h, w) = (source_tokens[0].h, source_tokens[0].w);
    let mut augs = Vec::with_capacity(b);
    let mut warped = Vec::with_capacity(b);
    for i in 0..b {
        let op = &ops[rng.random_range(0..ops.len())];
        let aug = op.sample((h, w), rng);
        warped.push(aug.apply_image(images[i], Some(images[b - 1 - i]))?);
        augs.push(aug);
    }
    Ok((augs, tokenize_batch(&warped, codebook, patch_size)?))
}

/// Trains `f` and `g` on pairs generated on the fly from `images`.
pub fn train_token_adapt(
    images: &[Image],
    codebook: &Codebook,
    patch_size: usize,
    ops: &[PixelOp],
    cfg: &TokenAdaptTrainConfig,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<(TokenAdaptModule, Vec<LossRecord>)> {
    if images.is_empty() {
        return Err(Error::Empty("TokenAdapt pair source has no images".into()));
    }
    if ops.is_empty() {
        return Err(invalid("TokenAdapt needs at least one augmentation"));
    }
    for op in ops {
        op.validate()?;
        if !op.is_token_compatible() {
            return Err(invalid(format!("`{}` has no action in token space", op.name())));
        }
    }
    if cfg.batch_size == 0 || !(cfg.epochs >= 0.0) || !(cfg.lr >= 0.0) {
        return Err(invalid("TokenAdapt needs batch_size > 0, epochs >= 0 and lr >= 0"));
    }
    let mut mcfg = TokenAdaptConfig::for_codebook(codebook, cfg.heads, cfg.seed);
    mcfg.mlp_ratio = cfg.mlp_ratio;
    mcfg.init_temperature = cfg.init_temperature;
    let module = TokenAdaptModule::new(mcfg, codebook, DType::F32)?;
    let source = tokenize_batch(images, codebook, patch_size)?;
    let n = images.len();
    let bs = cfg.batch_size.min(n);
    let total = (cfg.epochs * n as f64 / bs as f64).ceil() as usize;
    let steps_per_epoch = n.div_ceil(bs);
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr.min(cfg.lr),
        warmup_steps: cfg.warmup_steps.min(total / 2),
        total_steps: total,
    };
    let mut opt = AdamW::new(
        module.params(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    )?;
    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut aug_rng = stream(cfg.seed, 2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(total);
    for step in 0..total {
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order.shuffle(&mut shuffle_rng);
        }
        let idx = &order[pos * bs..((pos + 1) * bs).min(n)];
        let imgs: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
        let toks: Vec<&TokenGrid> = idx.iter().map(|&i| &source[i]).collect();
        let (augs, targets) = make_pairs(&imgs, &toks, ops, codebook, patch_size, &mut aug_rng)?;
        let z = toks.iter().map(|t| codebook.lookup(t)).collect::<Result<Vec<_>>>()?;
        let loss = module.loss(&z, &augs, &targets)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        opt.step(&loss.backward()?, sched.lr(step))?;
        let rec = LossRecord {
            epoch,
            step,
            loss: value,
        };
        on_record(&rec);
        records.push(rec);
    }
    Ok((module, records))
}

/// Held-out agreement with `tokenize(A(x))` for the module and for the
/// naive (module-free) token augmentation, over the same sampled `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub module: f64,
    pub naive: f64,
    pub positions: usize,
}

pub fn measure_agreement(
    module: &TokenAdaptModule,
    images: &[Image],
    codebook: &Codebook,
    patch_size: usize,
    ops: &[PixelOp],
    seed: u64,
) -> Result<AgreementReport> {
    if images.is_empty() {
        return Err(Error::Empty("agreement set has no images".into()));
    }
    let source = tokenize_batch(images, codebook, patch_size)?;
    let mut rng = stream(seed, 3);
    let (mut hit_m, mut hit_n, mut total) = (0usize, 0usize, 0usize);
    for chunk in (0..images.len()).collect::<Vec<_>>().chunks(128) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
        let toks: Vec<&TokenGrid> = chunk.iter().map(|&i| &source[i]).collect();
        let (augs, targets) = make_pairs(&imgs, &toks, ops, codebook, patch_size, &mut rng)?;
        let z = toks.iter().map(|t| codebook.lookup(t)).collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, SampledAug)> = augs.iter().cloned().enumerate().collect();
        let pred = module.adapt(&z, &jobs)?;
        let b = toks.len();
        for i in 0..b {
            let naive = naive_token_aug(toks[i], &augs[i], Some(toks[b - 1 - i]), codebook)?;
            let t = &targets[i];
            hit_m += pred[i].indices.iter().zip(&t.indices).filter(|(a, b)| a == b).count();
            hit_n += naive.indices.iter().zip(&t.indices).filter(|(a, b)| a == b).count();
            total += t.len();
        }
    }
    Ok(AgreementReport {
        module: hit_m as f64 / total as f64,
        naive: hit_n as f64 / total as f64,
        positions: total,
    })
}
