//! Run configuration: a schema-versioned TOML document with one section per
//! command. Unknown keys are rejected with their full key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stok::augment::{AugSpec, CorruptionKind};
use stok::nn::StemKind;

use crate::error::{CliError, CliResult};

pub const SCHEMA: u32 = 1;
pub const SEED_ENV: &str = "STOK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default)]
    pub tokenadapt: TokenAdaptSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub decode: DecodeSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedural shapes generated from `toy_seed`.
    Toy,
    /// `<path>/<split>/<class>/<image>.png`.
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub toy_train: usize,
    pub toy_val: usize,
    pub toy_size: usize,
    pub toy_seed: u64,
    pub patch: usize,
    pub k: usize,
    /// Training images used to fit the codebook (0 = all).
    pub fit_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Toy,
            path: None,
            toy_train: 5000,
            toy_val: 1000,
            toy_size: 64,
            toy_seed: 11,
            patch: 8,
            k: 512,
            fit_images: 2000,
        }
    }
}

/// Artifacts produced by earlier commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub codebook: Option<PathBuf>,
    /// Directory holding `<split>.stok`, `<split>.labels`, `<split>.manifest.toml`.
    pub tokens: Option<PathBuf>,
    pub tokenadapt: Option<PathBuf>,
    /// `SMTM` or `SMOD` checkpoint for `finetune`.
    pub pretrained: Option<PathBuf>,
    /// `SMOD` checkpoint for `eval`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenAdaptSection {
    pub epochs: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub init_temperature: f64,
    /// Pixel augmentations the module learns to mirror.
    pub ops: Vec<AugSpec>,
    /// Training images used for pairs (0 = all).
    pub max_images: usize,
    /// Held-out images scored for token agreement (0 = skip).
    pub agreement_images: usize,
}

impl Default for TokenAdaptSection {
    fn default() -> Self {
        let t = stok::tokenadapt::TokenAdaptTrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr: t.min_lr,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            heads: t.heads,
            mlp_ratio: t.mlp_ratio,
            init_temperature: t.init_temperature,
            ops: ["rrc", "hflip", "affine", "mixup", "cutmix"].into_iter().map(AugSpec::new).collect(),
            max_images: 0,
            agreement_images: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub dec_depth: usize,
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
    /// Token-space augmentation (identity / token_adapt only). Empty = none.
    pub augment: Vec<AugSpec>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let h = stok::mtm::PretrainConfig::default();
        Self {
            width: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
            dec_depth: 2,
            epochs: h.epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            min_lr: h.min_lr,
            weight_decay: h.weight_decay,
            warmup_epochs: h.warmup_epochs,
            ratio_mean: h.ratio_mean,
            ratio_std: h.ratio_std,
            ratio_lo: h.ratio_lo,
            ratio_hi: h.ratio_hi,
            augment: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    None,
    Seit,
    SeitPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Defaults to `conv4x4_overlap` for `train` and `conv2x2` for `finetune`.
    pub stem: Option<StemKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    /// Used when `augment` is empty.
    pub preset: Preset,
    pub augment: Vec<AugSpec>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let r = stok::model::TrainRecipe::default();
        Self {
            width: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
            stem: None,
            epochs: r.epochs,
            batch_size: r.batch_size,
            lr: r.lr,
            min_lr: r.min_lr,
            weight_decay: r.weight_decay,
            warmup_epochs: r.warmup_epochs,
            label_smoothing: r.label_smoothing,
            preset: Preset::Seit,
            augment: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severities: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: String,
    pub corruptions: Vec<CorruptionSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: "val".into(),
            corruptions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub split: String,
    pub count: usize,
    pub op: AugSpec,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            split: "val".into(),
            count: 8,
            op: AugSpec::new("hflip"),
        }
    }
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `key.path=value` pairs; values parse as TOML, else as strings.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn insert(table: &mut toml::Table, path: &str, value: toml::Value) -> CliResult<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key path `{path}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{path}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses `text`, applies overrides (file < `STOK_SEED` < flags) and
    /// resolves relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path, ov: &Overrides, env_seed: Option<&str>) -> CliResult<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for kv in &ov.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{kv}`")))?;
            insert(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(seed) = ov.seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        if cfg.schema != SCHEMA {
            return Err(CliError::Config(format!("schema {} is not supported (expected {SCHEMA})", cfg.schema)));
        }
        cfg.resolve_paths(base);
        if let Some(out) = &ov.out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, ov: &Overrides) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read `{}`: {e}", path.display())))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(parent)?;
        let env = std::env::var(SEED_ENV).ok();
        Self::from_toml(&text, &base, ov, env.as_deref())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        let i = &mut self.inputs;
        for p in [&mut i.codebook, &mut i.tokens, &mut i.tokenadapt, &mut i.pretrained, &mut i.checkpoint]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let d = &self.data;
        if d.patch == 0 || d.k < 2 {
            return bad("data.patch must be positive and data.k >= 2".into());
        }
        if d.source == DataSource::Folder && d.path.is_none() {
            return bad("data.path is required when data.source = \"folder\"".into());
        }
        if d.source == DataSource::Toy && (d.toy_size == 0 || d.toy_size % d.patch != 0) {
            return bad(format!("data.toy_size {} must be a positive multiple of data.patch", d.toy_size));
        }
        let pos = [
            ("tokenadapt.batch_size", self.tokenadapt.batch_size),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("train.batch_size", self.train.batch_size),
        ];
        for (k, v) in pos {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        let lrs = [
            ("tokenadapt.lr", self.tokenadapt.lr),
            ("pretrain.lr", self.pretrain.lr),
            ("train.lr", self.train.lr),
        ];
        for (k, v) in lrs {
            if !(v >= 0.0) {
                return bad(format!("{k} must be >= 0"));
            }
        }
        for c in &self.eval.corruptions {
            if c.severities.iter().any(|s| !(1..=5).contains(s)) {
                return bad("eval.corruptions severities must be in 1..=5".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
