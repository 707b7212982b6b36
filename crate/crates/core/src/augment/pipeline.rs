//! Augmentation pipelines over token batches.
//!
//! A pipeline runs in three stages: token grids, one-hot grids, then
//! embeddings. Operators must be listed in non-decreasing stage order; the
//! pipeline converts between stages as it goes. Mixing operators pair sample
//! `i` with sample `B - 1 - i` of the same batch.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::color::{color_adapt, emb_noise, DEFAULT_EPS};
use super::pixel::{PixelOp, SampledAug};
use super::token::{mix_labels, token_cutmix, token_eda_swap, token_rrc, OneHotGrid};
use crate::codec::{Codebook, EmbeddingGrid, TokenGrid};
use crate::error::{invalid, shape, Error, Result};
use crate::rng::Rng;

/// One pipeline entry as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugSpec {
    pub op: String,
    #[serde(default = "one")]
    pub prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shear: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Noise std in units of the codebook's entry standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    /// Operators routed through TokenAdapt; one is drawn uniformly per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ops: Option<Vec<AugSpec>>,
}

fn one() -> f64 {
    1.0
}

impl AugSpec {
    pub fn new(op: &str) -> Self {
        Self {
            op: op.to_string(),
            prob: 1.0,
            scale: None,
            ratio: None,
            degrees: None,
            translate: None,
            shear: None,
            alpha: None,
            std: None,
            eps: None,
            swap_prob: None,
            max_delta: None,
            low: None,
            high: None,
            ops: None,
        }
    }

    pub fn with_prob(mut self, prob: f64) -> Self {
        self.prob = prob;
        self
    }

    fn set_params(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        macro_rules! check {
            ($($f:ident),*) => { $( if self.$f.is_some() { v.push(stringify!($f)); } )* };
        }
        check!(scale, ratio, degrees, translate, shear, alpha, std, eps, swap_prob, max_delta, low, high, ops);
        v
    }

    fn only(&self, allowed: &[&str]) -> Result<()> {
        for p in self.set_params() {
            if !allowed.contains(&p) {
                return Err(invalid(format!("parameter `{p}` does not apply to op `{}`", self.op)));
            }
        }
        Ok(())
    }

    /// Parses a pixel-style operator (used inside `token_adapt` and by
    /// [`super::pixel_aug`] callers).
    pub fn pixel_op(&self) -> Result<PixelOp> {
        let op = match self.op.as_str() {
            "identity" => {
                self.only(&[])?;
                PixelOp::Identity
            }
            "hflip" => {
                self.only(&[])?;
                PixelOp::Hflip
            }
            "rrc" => {
                self.only(&["scale", "ratio"])?;
                let PixelOp::Rrc { scale, ratio } = PixelOp::rrc() else { unreachable!() };
                PixelOp::Rrc {
                    scale: self.scale.unwrap_or(scale),
                    ratio: self.ratio.unwrap_or(ratio),
                }
            }
            "affine" => {
                self.only(&["degrees", "translate", "shear"])?;
                let PixelOp::Affine { degrees, translate, shear } = PixelOp::affine() else { unreachable!() };
                PixelOp::Affine {
                    degrees: self.degrees.unwrap_or(degrees),
                    translate: self.translate.unwrap_or(translate),
                    shear: self.shear.unwrap_or(shear),
                }
            }
            "mixup" => {
                self.only(&["alpha"])?;
                PixelOp::Mixup { alpha: self.alpha.unwrap_or(0.8) }
            }
            "cutmix" => {
                self.only(&["alpha"])?;
                PixelOp::Cutmix { alpha: self.alpha.unwrap_or(1.0) }
            }
            "brightness" => {
                self.only(&["max_delta"])?;
                PixelOp::Brightness { max_delta: self.max_delta.unwrap_or(0.2) }
            }
            "contrast" => {
                self.only(&["low", "high"])?;
                PixelOp::Contrast {
                    low: self.low.unwrap_or(0.8),
                    high: self.high.unwrap_or(1.2),
                }
            }
            other => return Err(invalid(format!("`{other}` is not a pixel operator"))),
        };
        op.validate()?;
        Ok(op)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Token,
    OneHot,
    Embed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Token => "token",
            Stage::OneHot => "one-hot",
            Stage::Embed => "embedding",
        })
    }
}

/// A validated pipeline step.
#[derive(Debug, Clone, PartialEq)]
pub enum AugOp {
    Identity,
    TokenEda { swap_prob: f64 },
    TokenRrc { scale: (f64, f64) },
    /// Pixel-style operators applied in TokenAdapt's compatible space.
    TokenAdapt { ops: Vec<PixelOp> },
    /// Pixel-style operator applied to embeddings directly.
    Embed(PixelOp),
    ColorAdapt { eps: f64 },
    TokenCutmix { alpha: f64 },
    EmbNoise { std: f64 },
}

impl AugOp {
    pub fn parse(spec: &AugSpec) -> Result<Self> {
        if !(0.0..=1.0).contains(&spec.prob) {
            return Err(invalid(format!("probability {} of `{}` outside [0, 1]", spec.prob, spec.op)));
        }
        Ok(match spec.op.as_str() {
            "identity" => {
                spec.only(&[])?;
                AugOp::Identity
            }
            "token_eda" => {
                spec.only(&["swap_prob"])?;
                let swap_prob = spec.swap_prob.unwrap_or(0.1);
                if !(0.0..=1.0).contains(&swap_prob) {
                    return Err(invalid("token_eda swap_prob outside [0, 1]"));
                }
                AugOp::TokenEda { swap_prob }
            }
            "token_rrc" => {
                spec.only(&["scale"])?;
                let scale = spec.scale.unwrap_or((0.35, 1.0));
                super::pixel::check_scale(scale)?;
                AugOp::TokenRrc { scale }
            }
            "token_adapt" => {
                spec.only(&["ops"])?;
                let inner = spec.ops.as_deref().unwrap_or_default();
                if inner.is_empty() {
                    return Err(invalid("token_adapt needs a non-empty `ops` list"));
                }
                let mut ops = Vec::with_capacity(inner.len());
                for s in inner {
                    if s.prob != 1.0 || s.ops.is_some() {
                        return Err(invalid("operators inside token_adapt take no prob or nested ops"));
                    }
                    let op = s.pixel_op()?;
                    if !op.is_token_compatible() {
                        return Err(invalid(format!("`{}` has no action in token space", s.op)));
                    }
                    ops.push(op);
                }
                AugOp::TokenAdapt { ops }
            }
            "color_adapt" => {
                spec.only(&["eps"])?;
                let eps = spec.eps.unwrap_or(DEFAULT_EPS);
                if !(eps > 0.0) {
                    return Err(invalid("color_adapt eps must be positive"));
                }
                AugOp::ColorAdapt { eps }
            }
            "token_cutmix" => {
                spec.only(&["alpha"])?;
                let alpha = spec.alpha.unwrap_or(1.0);
                if !(alpha > 0.0) {
                    return Err(invalid("token_cutmix alpha must be positive"));
                }
                AugOp::TokenCutmix { alpha }
            }
            "emb_noise" => {
                spec.only(&["std"])?;
                let std = spec.std.unwrap_or(0.1);
                if !(std >= 0.0) {
                    return Err(invalid("emb_noise std must be non-negative"));
                }
                AugOp::EmbNoise { std }
            }
            "hflip" | "rrc" | "affine" | "mixup" | "cutmix" => AugOp::Embed(spec.pixel_op()?),
            "brightness" | "contrast" => {
                return Err(invalid(format!("`{}` is a pixel-only operator", spec.op)))
            }
            other => return Err(invalid(format!("unknown augmentation op `{other}`"))),
        })
    }

    /// `None` for stage-agnostic steps.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            AugOp::Identity => None,
            AugOp::TokenEda { .. } => Some(Stage::Token),
            AugOp::TokenRrc { .. } => Some(Stage::OneHot),
            _ => Some(Stage::Embed),
        }
    }
}

/// Converts `S`-space augmentations back to tokens (implemented by the
/// trained TokenAdapt module).
pub trait TokenAdapter {
    fn codebook_id(&self) -> &str;

    /// For each job `(i, aug)` returns the tokens of
    /// `g(aug(f(z[i]), f(z[B-1-i])))` after quantization.
    fn adapt(&self, z: &[EmbeddingGrid], jobs: &[(usize, SampledAug)]) -> Result<Vec<TokenGrid>>;
}

/// Output of a pipeline run: embeddings plus soft class targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AugBatch {
    pub embeddings: Vec<EmbeddingGrid>,
    pub targets: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    specs: Vec<AugSpec>,
    steps: Vec<(AugOp, f64)>,
}

enum State {
    Tokens(Vec<TokenGrid>),
    OneHot(Vec<OneHotGrid>),
    Embed(Vec<EmbeddingGrid>),
}

/// Validates specs and their ordering into a pipeline.
pub fn compose(specs: &[AugSpec]) -> Result<Pipeline> {
    let mut steps = Vec::with_capacity(specs.len());
    let mut stage = Stage::Token;
    for (i, spec) in specs.iter().enumerate() {
        let op = AugOp::parse(spec).map_err(|e| invalid(format!("augment[{i}]: {e}")))?;
        if let Some(s) = op.stage() {
            if s < stage {
                return Err(invalid(format!(
                    "augment[{i}]: `{}` works on {s} grids but follows a {stage}-stage op",
                    spec.op
                )));
            }
            stage = s;
        }
        steps.push((op, spec.prob));
    }
    Ok(Pipeline {
        specs: specs.to_vec(),
        steps,
    })
}

/// Like [`compose`] but only admits geometric TokenAdapt operators, which
/// keep the output a hard token grid.
pub fn compose_mtm(specs: &[AugSpec]) -> Result<Pipeline> {
    let p = compose(specs)?;
    for (i, (op, _)) in p.steps.iter().enumerate() {
        match op {
            AugOp::Identity => {}
            AugOp::TokenAdapt { ops } => {
                if let Some(bad) = ops.iter().find(|o| !matches!(o, PixelOp::Identity | PixelOp::Hflip | PixelOp::Affine { .. })) {
                    return Err(invalid(format!(
                        "augment[{i}]: `{}` is not allowed during masked token pre-training",
                        bad.name()
                    )));
                }
            }
            _ => {
                return Err(invalid(format!(
                    "augment[{i}]: `{}` is not allowed during masked token pre-training",
                    p.specs[i].op
                )))
            }
        }
    }
    Ok(p)
}

impl Pipeline {
    pub fn identity() -> Self {
        Self {
            specs: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn specs(&self) -> &[AugSpec] {
        &self.specs
    }

    pub fn steps(&self) -> &[(AugOp, f64)] {
        &self.steps
    }

    pub fn uses_token_adapt(&self) -> bool {
        self.steps.iter().any(|(op, _)| matches!(op, AugOp::TokenAdapt { .. }))
    }

    /// Token-EDA, token RRC, token CutMix and embedding noise.
    pub fn seit() -> Self {
        compose(&seit_specs()).expect("default pipeline is valid")
    }

    /// The baseline plus TokenAdapt-gated pixel operators and ColorAdapt.
    pub fn seit_plus() -> Self {
        compose(&seit_plus_specs()).expect("default pipeline is valid")
    }

    pub fn mtm_default() -> Self {
        compose_mtm(&mtm_specs()).expect("default pipeline is valid")
    }

    /// Runs the pipeline on a batch. `num_classes = 0` skips targets.
    pub fn apply(
        &self,
        batch: &[TokenGrid],
        codebook: &Codebook,
        num_classes: usize,
        adapter: Option<&dyn TokenAdapter>,
        rng: &mut Rng,
    ) -> Result<AugBatch> {
        self.check_batch(batch, codebook, adapter)?;
        let mut targets = Vec::with_capacity(batch.len());
        if num_classes > 0 {
            for (i, g) in batch.iter().enumerate() {
                let y = g.label.ok_or_else(|| invalid(format!("sample {i} has no label")))? as usize;
                if y >= num_classes {
                    return Err(invalid(format!("label {y} of sample {i} >= {num_classes} classes")));
                }
                let mut t = vec![0.0f32; num_classes];
                t[y] = 1.0;
                targets.push(t);
            }
        }
        let n = batch.len();
        let noise_scale = entry_std(codebook);
        let mut state = State::Tokens(batch.to_vec());
        for (op, prob) in &self.steps {
            if let Some(stage) = op.stage() {
                state = advance(state, stage, codebook)?;
            }
            let gate: Vec<bool> = (0..n).map(|_| *prob >= 1.0 || rng.random_bool(*prob)).collect();
            match (op, &mut state) {
                (AugOp::Identity, _) => {}
                (AugOp::TokenEda { swap_prob }, State::Tokens(v)) => {
                    for (g, on) in v.iter_mut().zip(&gate) {
                        if *on {
                            *g = token_eda_swap(g, *swap_prob, rng)?;
                        }
                    }
                }
                (AugOp::TokenRrc { scale }, State::OneHot(v)) => {
                    for (g, on) in v.iter_mut().zip(&gate) {
                        if *on {
                            *g = token_rrc(g, *scale, rng)?;
                        }
                    }
                }
                (AugOp::TokenAdapt { ops }, State::Embed(v)) => {
                    let mut jobs = Vec::new();
                    for (i, on) in gate.iter().enumerate() {
                        if *on {
                            let op = &ops[rng.random_range(0..ops.len())];
                            jobs.push((i, op.sample((v[i].h, v[i].w), rng)));
                        }
                    }
                    if !jobs.is_empty() {
                        let adapter = adapter.ok_or_else(|| invalid("token_adapt needs a trained TokenAdapt module"))?;
                        let out = adapter.adapt(v, &jobs)?;
                        if out.len() != jobs.len() {
                            return Err(shape("TokenAdapt returned the wrong number of grids"));
                        }
                        let old = targets.clone();
                        for ((i, aug), t) in jobs.iter().zip(out) {
                            v[*i] = codebook.lookup(&t)?;
                            if num_classes > 0 {
                                targets[*i] = mix_labels(&old[*i], &old[n - 1 - i], aug.primary_weight());
                            }
                        }
                    }
                }
                (AugOp::Embed(pop), State::Embed(v)) => {
                    let old = v.clone();
                    let old_t = targets.clone();
                    for i in 0..n {
                        if gate[i] {
                            let aug = pop.sample((v[i].h, v[i].w), rng);
                            v[i] = aug.apply_features(&old[i], Some(&old[n - 1 - i]))?;
                            if num_classes > 0 {
                                targets[i] = mix_labels(&old_t[i], &old_t[n - 1 - i], aug.primary_weight());
                            }
                        }
                    }
                }
                (AugOp::ColorAdapt { eps }, State::Embed(v)) => {
                    let old = v.clone();
                    for i in 0..n {
                        if gate[i] {
                            v[i] = color_adapt(&old[i], &old[n - 1 - i], *eps)?;
                        }
                    }
                }
                (AugOp::TokenCutmix { alpha }, State::Embed(v)) => {
                    let old = v.clone();
                    let old_t = targets.clone();
                    let empty: Vec<f32> = Vec::new();
                    for i in 0..n {
                        if gate[i] {
                            let (ya, yb) = if num_classes > 0 {
                                (&old_t[i], &old_t[n - 1 - i])
                            } else {
                                (&empty, &empty)
                            };
                            let (z, y, _) = token_cutmix(&old[i], ya, &old[n - 1 - i], yb, *alpha, rng)?;
                            v[i] = z;
                            if num_classes > 0 {
                                targets[i] = y;
                            }
                        }
                    }
                }
                (AugOp::EmbNoise { std }, State::Embed(v)) => {
                    for (z, on) in v.iter_mut().zip(&gate) {
                        if *on {
                            *z = emb_noise(z, std * noise_scale, rng)?;
                        }
                    }
                }
                _ => unreachable!("stage advanced before dispatch"),
            }
        }
        let State::Embed(embeddings) = advance(state, Stage::Embed, codebook)? else {
            unreachable!()
        };
        Ok(AugBatch { embeddings, targets })
    }

    /// Token-to-token application for masked token pre-training. Only valid
    /// for pipelines built by [`compose_mtm`].
    pub fn apply_tokens(
        &self,
        batch: &[TokenGrid],
        codebook: &Codebook,
        adapter: Option<&dyn TokenAdapter>,
        rng: &mut Rng,
    ) -> Result<Vec<TokenGrid>> {
        self.check_batch(batch, codebook, adapter)?;
        let mut out = batch.to_vec();
        let n = batch.len();
        for (op, prob) in &self.steps {
            let gate: Vec<bool> = (0..n).map(|_| *prob >= 1.0 || rng.random_bool(*prob)).collect();
            match op {
                AugOp::Identity => {}
                AugOp::TokenAdapt { ops } => {
                    let mut jobs = Vec::new();
                    for (i, on) in gate.iter().enumerate() {
                        if *on {
                            let op = &ops[rng.random_range(0..ops.len())];
                            if op.is_geometric() {
                                jobs.push((i, op.sample((out[i].h, out[i].w), rng)));
                            }
                        }
                    }
                    if !jobs.is_empty() {
                        let adapter = adapter.ok_or_else(|| invalid("token_adapt needs a trained TokenAdapt module"))?;
                        let z = out.iter().map(|g| codebook.lookup(g)).collect::<Result<Vec<_>>>()?;
                        let res = adapter.adapt(&z, &jobs)?;
                        for ((i, _), mut t) in jobs.iter().zip(res) {
                            t.label = out[*i].label;
                            out[*i] = t;
                        }
                    }
                }
                other => return Err(invalid(format!("{other:?} cannot run on hard token grids"))),
            }
        }
        Ok(out)
    }

    fn check_batch(&self, batch: &[TokenGrid], codebook: &Codebook, adapter: Option<&dyn TokenAdapter>) -> Result<()> {
        if let Some(first) = batch.first() {
            if batch.iter().any(|g| (g.h, g.w) != (first.h, first.w)) {
                return Err(shape("all grids in a batch must share shape"));
            }
        }
        for g in batch {
            g.check_range(codebook.k())?;
        }
        if let Some(a) = adapter {
            if self.uses_token_adapt() && a.codebook_id() != codebook.id() {
                return Err(Error::CodebookMismatch {
                    expected: codebook.id().to_string(),
                    found: a.codebook_id().to_string(),
                });
            }
        }
        Ok(())
    }
}

fn advance(state: State, to: Stage, codebook: &Codebook) -> Result<State> {
    Ok(match (state, to) {
        (State::Tokens(v), Stage::OneHot) => State::OneHot(
            v.iter()
                .map(|g| OneHotGrid::from_tokens(g, codebook.k()))
                .collect::<Result<_>>()?,
        ),
        (State::Tokens(v), Stage::Embed) => State::Embed(v.iter().map(|g| codebook.lookup(g)).collect::<Result<_>>()?),
        (State::OneHot(v), Stage::Embed) => State::Embed(v.iter().map(|g| g.embed(codebook)).collect::<Result<_>>()?),
        (s, _) => s,
    })
}

/// Population standard deviation of all codebook entries.
pub fn entry_std(codebook: &Codebook) -> f64 {
    let e = codebook.entries();
    let n = e.len() as f64;
    let mean = e.iter().map(|v| *v as f64).sum::<f64>() / n;
    (e.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn seit_specs() -> Vec<AugSpec> {
    vec![
        AugSpec {
            swap_prob: Some(0.1),
            ..AugSpec::new("token_eda").with_prob(0.5)
        },
        AugSpec {
            scale: Some((0.35, 1.0)),
            ..AugSpec::new("token_rrc")
        },
        AugSpec {
            alpha: Some(1.0),
            ..AugSpec::new("token_cutmix").with_prob(0.5)
        },
        AugSpec {
            std: Some(0.1),
            ..AugSpec::new("emb_noise")
        },
    ]
}

pub fn seit_plus_specs() -> Vec<AugSpec> {
    let mut v = seit_specs();
    let ta = AugSpec {
        ops: Some(
            ["rrc", "hflip", "affine", "mixup", "cutmix"]
                .iter()
                .map(|o| AugSpec::new(o))
                .collect(),
        ),
        ..AugSpec::new("token_adapt").with_prob(0.5)
    };
    v.insert(2, ta);
    v.insert(3, AugSpec::new("color_adapt").with_prob(0.5));
    v
}

pub fn mtm_specs() -> Vec<AugSpec> {
    vec![AugSpec {
        ops: Some(vec![AugSpec::new("hflip"), AugSpec::new("affine")]),
        ..AugSpec::new("token_adapt").with_prob(0.5)
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn codebook() -> Codebook {
        let mut rng = seeded(0);
        Codebook::new((0..16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect(), 16, 3).unwrap()
    }

    fn batch(n: usize) -> Vec<TokenGrid> {
        let mut rng = seeded(1);
        (0..n)
            .map(|i| {
                TokenGrid::new(4, 4, (0..16).map(|_| rng.random_range(0..16)).collect())
                    .unwrap()
                    .with_label((i % 3) as u16)
            })
            .collect()
    }

    /// Flips in S-space by flipping tokens; enough to exercise plumbing.
    struct GridFlip(String);

    impl TokenAdapter for GridFlip {
        fn codebook_id(&self) -> &str {
            &self.0
        }

        fn adapt(&self, z: &[EmbeddingGrid], jobs: &[(usize, SampledAug)]) -> Result<Vec<TokenGrid>> {
            let cb = codebook();
            jobs.iter()
                .map(|(i, a)| cb.quantize(&a.apply_features(&z[*i], Some(&z[z.len() - 1 - i]))?))
                .collect()
        }
    }

    #[test]
    fn empty_and_noop_pipelines_are_identity() {
        let cb = codebook();
        let b = batch(4);
        let want: Vec<_> = b.iter().map(|g| cb.lookup(g).unwrap()).collect();
        let empty = compose(&[]).unwrap().apply(&b, &cb, 3, None, &mut seeded(3)).unwrap();
        assert_eq!(empty.embeddings, want);
        let specs = [
            AugSpec {
                scale: Some((1.0, 1.0)),
                ..AugSpec::new("token_rrc")
            },
            AugSpec {
                std: Some(0.0),
                ..AugSpec::new("emb_noise")
            },
        ];
        let out = compose(&specs).unwrap().apply(&b, &cb, 3, None, &mut seeded(3)).unwrap();
        assert_eq!(out.embeddings, want);
        assert_eq!(out.targets[1], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn ordering_and_params_checked() {
        let bad_order = [AugSpec::new("emb_noise"), AugSpec::new("token_eda")];
        assert!(compose(&bad_order).is_err());
        let bad_param = [AugSpec {
            alpha: Some(1.0),
            ..AugSpec::new("emb_noise")
        }];
        assert!(compose(&bad_param).is_err());
        assert!(compose(&[AugSpec::new("token_eda").with_prob(1.5)]).is_err());
        assert!(compose(&[AugSpec::new("brightness")]).is_err());
        assert!(compose(&[AugSpec::new("sharpen")]).is_err());
        assert!(compose_mtm(&seit_specs()).is_err());
        let mixup_mtm = [AugSpec {
            ops: Some(vec![AugSpec::new("mixup")]),
            ..AugSpec::new("token_adapt")
        }];
        assert!(compose_mtm(&mixup_mtm).is_err());
    }

    #[test]
    fn defaults_compose() {
        assert_eq!(Pipeline::seit().steps().len(), 4);
        assert!(Pipeline::seit_plus().uses_token_adapt());
        assert!(Pipeline::mtm_default().uses_token_adapt());
    }

    #[test]
    fn deterministic_and_soft_targets() {
        let cb = codebook();
        let b = batch(6);
        let adapter = GridFlip(cb.id().to_string());
        let p = Pipeline::seit_plus();
        let a = p.apply(&b, &cb, 3, Some(&adapter), &mut seeded(9)).unwrap();
        let c = p.apply(&b, &cb, 3, Some(&adapter), &mut seeded(9)).unwrap();
        assert_eq!(a, c);
        for t in &a.targets {
            assert!((t.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn token_adapt_requires_matching_adapter() {
        let cb = codebook();
        let b = batch(2);
        let p = compose(&[AugSpec {
            ops: Some(vec![AugSpec::new("hflip")]),
            ..AugSpec::new("token_adapt")
        }])
        .unwrap();
        assert!(p.apply(&b, &cb, 3, None, &mut seeded(0)).is_err());
        let wrong = GridFlip("ffff".into());
        assert!(p.apply(&b, &cb, 3, Some(&wrong), &mut seeded(0)).is_err());
        let ok = GridFlip(cb.id().to_string());
        let out = p.apply_tokens(&b, &cb, Some(&ok), &mut seeded(0)).unwrap();
        assert_eq!(out[0], b[0].hflip());
    }

    #[test]
    fn spec_toml_roundtrip() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            augment: Vec<AugSpec>,
        }
        let w = Wrap {
            augment: seit_plus_specs(),
        };
        let text = toml::to_string(&w).unwrap();
        let back: Wrap = toml::from_str(&text).unwrap();
        assert_eq!(back.augment, w.augment);
        assert!(toml::from_str::<Wrap>("[[augment]]\nop = \"hflip\"\nbogus = 1\n").is_err());
    }
}
