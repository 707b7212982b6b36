//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use stok::augment::{compose, compose_mtm, AugSpec, PixelOp, Pipeline, TokenAdapter};
use stok::codec::{dataset_stats, decode_tokens, fit_toy_codebook, tokenize_batch, Codebook, TokenGrid};
use stok::image::{hstack, Image};
use stok::model::{
    evaluate, evaluate_images, finetune, train_supervised, BackboneConfig, Classifier, MetricRecord, Splits,
    TrainRecipe, MODEL_MAGIC,
};
use stok::mtm::{masked_accuracy, pretrain, MtmAugment, MtmConfig, MtmRecord, PretrainConfig, MTM_MAGIC};
use stok::nn::{write_atomic, Checkpoint, StemKind};
use stok::rng::stream;
use stok::tokenadapt::{
    apply_sampled, measure_agreement, naive_token_aug, train_token_adapt, LossRecord, TokenAdaptModule,
    TokenAdaptTrainConfig,
};

use crate::config::{Preset, RunConfig};
use crate::data::{self, encode_split, load_codebook, load_images, load_tokens, split_paths, SPLITS};
use crate::error::{CliError, CliResult};
use crate::report::{ExperimentReport, Run};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    FitCodebook,
    Tokenize,
    Stats,
    TrainTokenAdapt,
    Pretrain,
    Train,
    Finetune,
    Eval,
    DecodeDump,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::FitCodebook => "fit-codebook",
            Command::Tokenize => "tokenize",
            Command::Stats => "stats",
            Command::TrainTokenAdapt => "train-tokenadapt",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::DecodeDump => "decode-dump",
        }
    }
}

fn require(p: &Option<PathBuf>, what: &str, key: &str) -> CliResult<PathBuf> {
    match p {
        None => Err(CliError::Missing(format!("{what}: set `inputs.{key}`"))),
        Some(p) if !p.exists() => Err(CliError::Missing(format!("{what} `{}` (inputs.{key})", p.display()))),
        Some(p) => Ok(p.clone()),
    }
}

fn require_tokens(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = require(&cfg.inputs.tokens, "token dataset directory", "tokens")?;
    let (t, _, m) = split_paths(&dir, "train");
    if !t.exists() || !m.exists() {
        return Err(CliError::Missing(format!("train split in token dataset `{}`", dir.display())));
    }
    Ok(dir)
}

fn train_pipeline(cfg: &RunConfig) -> CliResult<Pipeline> {
    let t = &cfg.train;
    let p = if !t.augment.is_empty() {
        compose(&t.augment)
    } else {
        match t.preset {
            Preset::None => Ok(Pipeline::identity()),
            Preset::Seit => Ok(Pipeline::seit()),
            Preset::SeitPlus => Ok(Pipeline::seit_plus()),
        }
    };
    p.map_err(|e| CliError::Config(format!("train.augment: {e}")))
}

fn pretrain_pipeline(cfg: &RunConfig) -> CliResult<Option<Pipeline>> {
    if cfg.pretrain.augment.is_empty() {
        return Ok(None);
    }
    compose_mtm(&cfg.pretrain.augment)
        .map(Some)
        .map_err(|e| CliError::Config(format!("pretrain.augment: {e}")))
}

fn pixel_ops(specs: &[AugSpec], key: &str) -> CliResult<Vec<PixelOp>> {
    if specs.is_empty() {
        return Err(CliError::Config(format!("{key} must list at least one op")));
    }
    specs
        .iter()
        .map(|s| s.pixel_op().map_err(|e| CliError::Config(format!("{key}: {e}"))))
        .collect()
}

fn recipe(cfg: &RunConfig) -> TrainRecipe {
    let t = &cfg.train;
    TrainRecipe {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        min_lr: t.min_lr,
        weight_decay: t.weight_decay,
        warmup_epochs: t.warmup_epochs,
        label_smoothing: t.label_smoothing,
        seed: cfg.seed,
    }
}

/// Checks prerequisites and config consistency without touching the disk.
pub fn preflight(cmd: Command, cfg: &RunConfig) -> CliResult<()> {
    match cmd {
        Command::FitCodebook => Ok(()),
        Command::Tokenize => require(&cfg.inputs.codebook, "codebook file", "codebook").map(|_| ()),
        Command::Stats => require_tokens(cfg).map(|_| ()),
        Command::TrainTokenAdapt => {
            pixel_ops(&cfg.tokenadapt.ops, "tokenadapt.ops")?;
            require(&cfg.inputs.codebook, "codebook file", "codebook").map(|_| ())
        }
        Command::Pretrain => {
            require(&cfg.inputs.codebook, "codebook file", "codebook")?;
            require_tokens(cfg)?;
            if pretrain_pipeline(cfg)?.is_some_and(|p| p.uses_token_adapt()) {
                require(&cfg.inputs.tokenadapt, "TokenAdapt checkpoint", "tokenadapt")?;
            }
            Ok(())
        }
        Command::Train | Command::Finetune => {
            require(&cfg.inputs.codebook, "codebook file", "codebook")?;
            require_tokens(cfg)?;
            if train_pipeline(cfg)?.uses_token_adapt() {
                require(&cfg.inputs.tokenadapt, "TokenAdapt checkpoint", "tokenadapt")?;
            }
            recipe(cfg).validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
            if cmd == Command::Finetune {
                require(&cfg.inputs.pretrained, "pre-trained checkpoint", "pretrained")?;
            }
            Ok(())
        }
        Command::Eval => {
            require(&cfg.inputs.codebook, "codebook file", "codebook")?;
            require_tokens(cfg)?;
            require(&cfg.inputs.checkpoint, "model checkpoint", "checkpoint").map(|_| ())
        }
        Command::DecodeDump => {
            cfg.decode.op.pixel_op().map_err(|e| CliError::Config(format!("decode.op: {e}")))?;
            require(&cfg.inputs.codebook, "codebook file", "codebook")?;
            require_tokens(cfg).map(|_| ())
        }
    }
}

pub fn execute(cmd: Command, cfg: &RunConfig) -> CliResult<ExperimentReport> {
    preflight(cmd, cfg)?;
    let fresh = !cfg.out_dir.exists();
    let result = run_command(cmd, cfg);
    if result.is_err() && fresh {
        // a failed run leaves no partial output behind
        let _ = fs::remove_dir_all(&cfg.out_dir);
    }
    result
}

fn run_command(cmd: Command, cfg: &RunConfig) -> CliResult<ExperimentReport> {
    let mut run = Run::begin(cmd.name(), cfg)?;
    match cmd {
        Command::FitCodebook => fit_codebook(cfg, &mut run)?,
        Command::Tokenize => tokenize(cfg, &mut run)?,
        Command::Stats => stats(cfg, &mut run)?,
        Command::TrainTokenAdapt => train_tokenadapt(cfg, &mut run)?,
        Command::Pretrain => run_pretrain(cfg, &mut run)?,
        Command::Train | Command::Finetune => run_train(cmd, cfg, &mut run)?,
        Command::Eval => run_eval(cfg, &mut run)?,
        Command::DecodeDump => decode_dump(cfg, &mut run)?,
    }
    run.finish()
}

fn fit_codebook(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let data = load_images(&cfg.data)?;
    let n = match cfg.data.fit_images {
        0 => data.train.images.len(),
        m => m.min(data.train.images.len()),
    };
    run.note(format!("fitting K={} on {n} images", cfg.data.k));
    let cb = fit_toy_codebook(&data.train.images[..n], cfg.data.patch, cfg.data.k, cfg.seed)?;
    write_atomic(&run.artifact("codebook.scbk"), &cb.to_bytes())?;
    run.detail("codebook_id", json!(cb.id()));
    run.detail("k", json!(cb.k()));
    run.detail("d", json!(cb.d()));
    run.detail("fit_images", json!(n));
    Ok(())
}

fn tokenize(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let cb = load_codebook(cfg.inputs.codebook.as_ref().unwrap())?;
    let data = load_images(&cfg.data)?;
    if data.train.images.is_empty() {
        return Err(CliError::Data("no training images to tokenize".into()));
    }
    let mut outputs = Vec::new();
    for split in SPLITS {
        let s = data.split(split)?;
        if s.images.is_empty() {
            continue;
        }
        let mut grids = Vec::with_capacity(s.images.len());
        for chunk in s.images.chunks(1000) {
            grids.extend(tokenize_batch(chunk, &cb, cfg.data.patch)?);
        }
        for (g, &y) in grids.iter_mut().zip(&s.labels) {
            g.label = Some(y);
        }
        let raw: u64 = s.images.iter().map(|i| i.raw_bytes()).sum();
        outputs.push((split, encode_split(&grids, &cb, raw, &data.class_names)?));
    }
    // every split is encoded before anything is written
    for (split, (payload, labels, manifest)) in outputs {
        let (t, l, m) = split_paths(&run.out.join("artifacts"), split);
        write_atomic(&t, &payload)?;
        write_atomic(&l, &labels)?;
        write_atomic(&m, manifest.to_toml().as_bytes())?;
        let rep = dataset_stats(&manifest);
        run.note(format!("{split}: {} images, {} payload bytes", manifest.num_images, manifest.payload_bytes));
        run.storage(json!({ "split": split, "checksum": manifest.checksum, "report": rep }));
    }
    run.detail("codebook_id", json!(cb.id()));
    Ok(())
}

fn stats(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let dir = cfg.inputs.tokens.as_ref().unwrap();
    for split in SPLITS {
        let (t, _, m) = split_paths(dir, split);
        if !m.exists() {
            continue;
        }
        let manifest = data::read_manifest(dir, split)?;
        manifest.validate().map_err(|e| CliError::Data(format!("`{}`: {e}", m.display())))?;
        let size = fs::metadata(&t)
            .map_err(|_| CliError::Missing(format!("token file `{}`", t.display())))?
            .len();
        if size != manifest.payload_bytes {
            return Err(CliError::Data(format!(
                "`{}` is {size} bytes, manifest says {}",
                t.display(),
                manifest.payload_bytes
            )));
        }
        let rep = dataset_stats(&manifest);
        println!("[{split}]\n{rep}\n");
        run.storage(json!({ "split": split, "checksum": manifest.checksum, "report": rep }));
    }
    Ok(())
}

fn grid_of(split: &[TokenGrid]) -> CliResult<(usize, usize)> {
    split
        .first()
        .map(|g| (g.h, g.w))
        .ok_or_else(|| CliError::Data("token split is empty".into()))
}

fn num_classes(manifest_names: &[String], grids: &[TokenGrid]) -> usize {
    if !manifest_names.is_empty() {
        return manifest_names.len();
    }
    grids.iter().filter_map(|g| g.label).max().map_or(1, |m| m as usize + 1)
}

fn load_val(dir: &Path, cb: &Codebook) -> CliResult<Vec<TokenGrid>> {
    let (_, _, m) = split_paths(dir, "val");
    if m.exists() {
        Ok(load_tokens(dir, "val", cb)?.grids)
    } else {
        Ok(Vec::new())
    }
}

fn train_tokenadapt(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let cb = load_codebook(cfg.inputs.codebook.as_ref().unwrap())?;
    let ops = pixel_ops(&cfg.tokenadapt.ops, "tokenadapt.ops")?;
    let data = load_images(&cfg.data)?;
    let t = &cfg.tokenadapt;
    let n = match t.max_images {
        0 => data.train.images.len(),
        m => m.min(data.train.images.len()),
    };
    let tc = TokenAdaptTrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        min_lr: t.min_lr,
        weight_decay: t.weight_decay,
        warmup_steps: t.warmup_steps,
        heads: t.heads,
        mlp_ratio: t.mlp_ratio,
        init_temperature: t.init_temperature,
        seed: cfg.seed,
    };
    run.note(format!("training TokenAdapt on {n} images, ops {:?}", ops.iter().map(|o| o.name()).collect::<Vec<_>>()));
    let (module, records) = train_token_adapt(&data.train.images[..n], &cb, cfg.data.patch, &ops, &tc, |r| {
        if r.step % 20 == 0 {
            eprintln!("[train-tokenadapt] step {} loss {:.4}", r.step, r.loss);
        }
    })?;
    let mut csv = Vec::new();
    LossRecord::write_csv(&records, &mut csv)?;
    write_atomic(&run.log("loss.csv"), &csv)?;
    module.save(&run.artifact("tokenadapt.stam"))?;
    let last = records.last().map_or(0, |r| r.epoch);
    if t.agreement_images > 0 && !data.val.images.is_empty() {
        let m = t.agreement_images.min(data.val.images.len());
        let rep = measure_agreement(&module, &data.val.images[..m], &cb, cfg.data.patch, &ops, cfg.seed)?;
        run.metric(MetricRecord::new(last, "val", "agreement_tokenadapt", rep.module));
        run.metric(MetricRecord::new(last, "val", "agreement_naive", rep.naive));
    }
    Ok(())
}

fn run_pretrain(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let cb = load_codebook(cfg.inputs.codebook.as_ref().unwrap())?;
    let dir = cfg.inputs.tokens.as_ref().unwrap();
    let train = load_tokens(dir, "train", &cb)?.grids;
    let val = load_val(dir, &cb)?;
    let p = &cfg.pretrain;
    let mut mc = MtmConfig::for_codebook(&cb, grid_of(&train)?, cfg.seed);
    (mc.width, mc.depth, mc.heads, mc.mlp_ratio, mc.dec_depth) = (p.width, p.depth, p.heads, p.mlp_ratio, p.dec_depth);
    let hyper = PretrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        lr: p.lr,
        min_lr: p.min_lr,
        weight_decay: p.weight_decay,
        warmup_epochs: p.warmup_epochs,
        ratio_mean: p.ratio_mean,
        ratio_std: p.ratio_std,
        ratio_lo: p.ratio_lo,
        ratio_hi: p.ratio_hi,
        seed: cfg.seed,
    };
    let pipeline = pretrain_pipeline(cfg)?;
    let module = match (&pipeline, &cfg.inputs.tokenadapt) {
        (Some(pl), Some(path)) if pl.uses_token_adapt() => Some(TokenAdaptModule::load(path, &cb)?),
        _ => None,
    };
    let augment = pipeline.as_ref().map(|pl| MtmAugment {
        pipeline: pl,
        adapter: match &module {
            Some(m) => m as &dyn TokenAdapter,
            None => &NoAdapter,
        },
    });
    run.note(format!("pre-training on {} grids for {} epochs", train.len(), p.epochs));
    let (model, records) = pretrain(&train, &cb, mc, &hyper, augment, |r| {
        if r.step % 20 == 0 {
            eprintln!("[pretrain] epoch {} step {} loss {:.4} ratio {:.3}", r.epoch, r.step, r.loss, r.ratio_mean);
        }
    })
    .map_err(|e| match e {
        stok::Error::InvalidArgument(m) => CliError::Config(format!("pretrain: {m}")),
        other => other.into(),
    })?;
    let mut csv = Vec::new();
    MtmRecord::write_csv(&records, &mut csv)?;
    write_atomic(&run.log("loss.csv"), &csv)?;
    model.save(&run.artifact("mtm.smtm"))?;
    for e in 0..p.epochs {
        let ep: Vec<f64> = records.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
        if !ep.is_empty() {
            run.metric(MetricRecord::new(e, "train", "loss", ep.iter().sum::<f64>() / ep.len() as f64));
        }
    }
    if !val.is_empty() && p.epochs > 0 {
        let acc = masked_accuracy(&model, &val, &cb, p.ratio_mean.clamp(p.ratio_lo, p.ratio_hi), cfg.seed)?;
        run.metric(MetricRecord::new(p.epochs - 1, "val", "masked_top1", acc));
    }
    Ok(())
}

/// Placeholder adapter for pipelines that never call TokenAdapt.
struct NoAdapter;

impl TokenAdapter for NoAdapter {
    fn codebook_id(&self) -> &str {
        ""
    }

    fn adapt(
        &self,
        _z: &[stok::codec::EmbeddingGrid],
        _jobs: &[(usize, stok::augment::SampledAug)],
    ) -> stok::Result<Vec<TokenGrid>> {
        Err(stok::Error::InvalidArgument("token_adapt needs a trained TokenAdapt module".into()))
    }
}

fn read_magic(path: &Path) -> CliResult<[u8; 4]> {
    let bytes = fs::read(path).map_err(|_| CliError::Missing(format!("checkpoint `{}`", path.display())))?;
    bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| CliError::Data(format!("`{}` is too short to be a checkpoint", path.display())))
}

fn run_train(cmd: Command, cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let cb = load_codebook(cfg.inputs.codebook.as_ref().unwrap())?;
    let dir = cfg.inputs.tokens.as_ref().unwrap();
    let train = load_tokens(dir, "train", &cb)?;
    let val = load_val(dir, &cb)?;
    let pipeline = train_pipeline(cfg)?;
    let module = match &cfg.inputs.tokenadapt {
        Some(p) if pipeline.uses_token_adapt() => Some(TokenAdaptModule::load(p, &cb)?),
        _ => None,
    };
    let t = &cfg.train;
    let default_stem = if cmd == Command::Finetune {
        StemKind::Conv2x2
    } else {
        StemKind::Conv4x4Overlap
    };
    let nc = num_classes(&train.manifest.class_names, &train.grids);
    let config = BackboneConfig {
        depth: t.depth,
        width: t.width,
        heads: t.heads,
        mlp_ratio: t.mlp_ratio,
        stem: t.stem.unwrap_or(default_stem),
        ..BackboneConfig::for_codebook(&cb, grid_of(&train.grids)?, nc, cfg.seed)
    };
    config.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
    let splits = Splits {
        train: &train.grids,
        val: &val,
    };
    let adapter = module.as_ref().map(|m| m as &dyn TokenAdapter);
    let rec = recipe(cfg);
    let mut log = Vec::new();
    let model = if cmd == Command::Finetune {
        let path = cfg.inputs.pretrained.as_ref().unwrap();
        let magic = read_magic(path)?;
        if magic != MTM_MAGIC && magic != MODEL_MAGIC {
            return Err(CliError::Data(format!("`{}` is neither an SMTM nor an SMOD checkpoint", path.display())));
        }
        let ckpt = Checkpoint::load(path, &magic)?;
        let (m, l, rep) = finetune(&ckpt, splits, &cb, config, &rec, &pipeline, adapter, |r| {
            eprintln!("[finetune] {}", r.csv_line())
        })?;
        for r in &rep.reinitialized {
            run.note(format!("re-initialized {r}"));
        }
        run.detail("load_report", serde_json::to_value(&rep).map_err(|e| CliError::Other(e.to_string()))?);
        log = l;
        m
    } else {
        let (m, l) = train_supervised(splits, &cb, config, &rec, &pipeline, adapter, |r| {
            eprintln!("[train] {}", r.csv_line())
        })?;
        log.extend(l);
        m
    };
    model.save(&run.artifact("model.smod"))?;
    for r in log {
        run.metric_quiet(r);
    }
    Ok(())
}

fn run_eval(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let cb = load_codebook(cfg.inputs.codebook.as_ref().unwrap())?;
    let path = cfg.inputs.checkpoint.as_ref().unwrap();
    let model = Classifier::from_checkpoint(&Checkpoint::load(path, &MODEL_MAGIC)?)?;
    if model.codebook_id() != cb.id() {
        return Err(CliError::Data(format!(
            "checkpoint expects codebook {}, got {}",
            model.codebook_id(),
            cb.id()
        )));
    }
    let split = cfg.eval.split.as_str();
    let dir = cfg.inputs.tokens.as_ref().unwrap();
    let grids = load_tokens(dir, split, &cb)?.grids;
    let clean = evaluate(&model, &grids, &cb)?;
    run.metric(MetricRecord::new(0, split, "top1", clean));
    if cfg.eval.corruptions.is_empty() {
        return Ok(());
    }
    let data = load_images(&cfg.data)?;
    let s = data.split(split)?;
    let labels: Vec<u32> = s.labels.iter().map(|&y| y as u32).collect();
    let specs: Vec<_> = cfg.eval.corruptions.iter().map(|c| (c.kind, c.severities.clone())).collect();
    let rows = evaluate_images(&model, &s.images, &labels, &cb, cfg.data.patch, &specs, cfg.seed)?;
    for r in &rows {
        if let Some(kind) = r.kind {
            run.metric(MetricRecord::new(0, split, &format!("top1@{kind}:{}", r.severity), r.top1));
        } else {
            run.metric(MetricRecord::new(0, split, "top1_retokenized", r.top1));
        }
    }
    Ok(())
}

fn save_png(img: &Image, path: &Path) -> CliResult<()> {
    let tmp = path.with_extension("tmp.png");
    img.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn decode_dump(cfg: &RunConfig, run: &mut Run) -> CliResult<()> {
    let cb = load_codebook(cfg.inputs.codebook.as_ref().unwrap())?;
    let dir = cfg.inputs.tokens.as_ref().unwrap();
    let grids = load_tokens(dir, &cfg.decode.split, &cb)?.grids;
    let op = cfg.decode.op.pixel_op().map_err(|e| CliError::Config(format!("decode.op: {e}")))?;
    let module = match &cfg.inputs.tokenadapt {
        Some(p) => Some(TokenAdaptModule::load(p, &cb)?),
        None => None,
    };
    let n = cfg.decode.count.min(grids.len());
    let mut rng = stream(cfg.seed, 7);
    let patch = cfg.data.patch;
    for i in 0..n {
        let g = &grids[i];
        let partner = &grids[grids.len() - 1 - i];
        let aug = op.sample((g.h, g.w), &mut rng);
        let mut panels = vec![decode_tokens(g, &cb, patch)?];
        panels.push(decode_tokens(&naive_token_aug(g, &aug, Some(partner), &cb)?, &cb, patch)?);
        if let Some(m) = &module {
            panels.push(decode_tokens(&apply_sampled(g, &aug, Some(partner), m, &cb)?, &cb, patch)?);
        }
        save_png(&hstack(&panels)?, &run.artifact(&format!("decode_{i:03}.png")))?;
    }
    run.detail("panels", json!(if module.is_some() { "original | naive | tokenadapt" } else { "original | naive" }));
    run.detail("count", json!(n));
    Ok(())
}
