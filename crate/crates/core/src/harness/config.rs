use std::path::PathBuf;

use super::optim::AdamParams;
use crate::corpus::{SpecAugment, SynthSpec};
use crate::error::{Result, SateError};
use crate::model::ModelKind;
use crate::nn::{AdaptorKind, ModelConfig};

fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| SateError::config(format!("bad value {v:?} for {k}")))
}

/// Splits `key=value` lines, dropping `#` comments and blank lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SateError::config(format!("expected key=value, got {line:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamParams,
    pub warmup: usize,
    pub peak_lr: f64,
    pub epochs: usize,
    /// Stops early once this many updates have run; 0 means no limit.
    pub max_steps: usize,
    pub seed: u64,
    pub ckpt_dir: Option<PathBuf>,
    /// Updates between dev evaluations; the end of training always evaluates.
    pub eval_interval: usize,
    pub keep_best: usize,
    /// Raw input frames (tokens for MT) per batch.
    pub batch_frames: usize,
    pub spec_augment: Option<SpecAugment>,
    /// Dev utterances decoded (greedily) for checkpoint selection.
    pub dev_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamParams::default(),
            warmup: 400,
            peak_lr: 1e-3,
            epochs: 20,
            max_steps: 0,
            seed: 1,
            ckpt_dir: None,
            eval_interval: 500,
            keep_best: 5,
            batch_frames: 2000,
            spec_augment: None,
            dev_limit: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || self.keep_best == 0 || self.eval_interval == 0 {
            return Err(SateError::config("warmup, keep_best and eval_interval must be ≥ 1"));
        }
        if self.epochs == 0 || self.batch_frames == 0 || !(self.peak_lr > 0.0) {
            return Err(SateError::config("epochs, batch_frames and peak_lr must be positive"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(SateError::config("Adam betas must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "beta1" => self.adam.beta1 = p(key, value)?,
            "beta2" => self.adam.beta2 = p(key, value)?,
            "eps" => self.adam.eps = p(key, value)?,
            "warmup" => self.warmup = p(key, value)?,
            "peak_lr" => self.peak_lr = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "ckpt_dir" => self.ckpt_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "eval_interval" => self.eval_interval = p(key, value)?,
            "keep_best" => self.keep_best = p(key, value)?,
            "batch_frames" => self.batch_frames = p(key, value)?,
            "spec_augment" => {
                let on: bool = p(key, value)?;
                self.spec_augment = on.then(SpecAugment::default);
            }
            "dev_limit" => self.dev_limit = p(key, value)?,
            _ => return Err(SateError::config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("warmup", self.warmup.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            (
                "ckpt_dir",
                self.ckpt_dir.as_ref().map_or(String::new(), |d| d.display().to_string()),
            ),
            ("eval_interval", self.eval_interval.to_string()),
            ("keep_best", self.keep_best.to_string()),
            ("batch_frames", self.batch_frames.to_string()),
            ("spec_augment", self.spec_augment.is_some().to_string()),
            ("dev_limit", self.dev_limit.to_string()),
        ]
    }
}

/// Which pre-trained checkpoints seed a speech translation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSource {
    None,
    Asr,
    Mt,
    Both,
}

impl InitSource {
    pub fn name(self) -> &'static str {
        match self {
            InitSource::None => "none",
            InitSource::Asr => "asr_ckpt",
            InitSource::Mt => "mt_ckpt",
            InitSource::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => InitSource::None,
            "asr_ckpt" | "asr" => InitSource::Asr,
            "mt_ckpt" | "mt" => InitSource::Mt,
            "both" => InitSource::Both,
            other => return Err(SateError::config(format!("unknown init source {other:?}"))),
        })
    }

    pub fn uses_asr(self) -> bool {
        matches!(self, InitSource::Asr | InitSource::Both)
    }

    pub fn uses_mt(self) -> bool {
        matches!(self, InitSource::Mt | InitSource::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// CTC + translation interpolation.
    Sate,
    /// Adds distillation from frozen ASR and MT teachers.
    Mtkd,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Sate => "sate",
            LossKind::Mtkd => "mtkd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sate" => LossKind::Sate,
            "mtkd" => LossKind::Mtkd,
            other => return Err(SateError::config(format!("unknown loss kind {other:?}"))),
        })
    }
}

/// Kind of system being trained or evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    Model(ModelKind),
    /// ASR followed by MT; evaluated only, built from two checkpoints.
    Cascade,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Model(k) => k.name(),
            SystemKind::Cascade => "cascade",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "cascade" {
            return Ok(SystemKind::Cascade);
        }
        ModelKind::parse(s).map(SystemKind::Model)
    }
}

/// One row of an experiment table: what to build, how to initialize it and
/// which objective to train it with.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecipe {
    pub kind: SystemKind,
    pub init: InitSource,
    pub loss: LossKind,
    /// Overrides `model.adaptor` when set.
    pub adaptor: Option<AdaptorKind>,
    /// Overrides `model.ctc_layer_index` when set.
    pub ctc_layer_index: Option<usize>,
    pub asr_ckpt: Option<PathBuf>,
    pub mt_ckpt: Option<PathBuf>,
}

impl Default for ExperimentRecipe {
    fn default() -> Self {
        ExperimentRecipe {
            kind: SystemKind::Model(ModelKind::Sate),
            init: InitSource::None,
            loss: LossKind::Sate,
            adaptor: None,
            ctc_layer_index: None,
            asr_ckpt: None,
            mt_ckpt: None,
        }
    }
}

impl ExperimentRecipe {
    pub fn validate(&self) -> Result<()> {
        let st = matches!(
            self.kind,
            SystemKind::Model(ModelKind::Sate) | SystemKind::Model(ModelKind::E2eSt)
        );
        if self.loss == LossKind::Mtkd {
            if !st {
                return Err(SateError::config("mtkd applies to e2e_st and sate only"));
            }
            if self.asr_ckpt.is_none() || self.mt_ckpt.is_none() {
                return Err(SateError::config("mtkd requires both teacher checkpoints"));
            }
        }
        if self.init != InitSource::None && !st {
            return Err(SateError::config(format!(
                "pre-trained init does not apply to {}",
                self.kind.name()
            )));
        }
        if self.init.uses_asr() && self.asr_ckpt.is_none() {
            return Err(SateError::config("init from ASR needs asr_ckpt"));
        }
        if self.init.uses_mt() && self.mt_ckpt.is_none() {
            return Err(SateError::config("init from MT needs mt_ckpt"));
        }
        if self.kind == SystemKind::Cascade && (self.asr_ckpt.is_none() || self.mt_ckpt.is_none()) {
            return Err(SateError::config("cascade needs asr_ckpt and mt_ckpt"));
        }
        Ok(())
    }

    /// `base` with this recipe's adaptor and CTC placement, where given.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            adaptor: self.adaptor.unwrap_or(base.adaptor),
            ctc_layer_index: self.ctc_layer_index.unwrap_or(base.ctc_layer_index),
            ..base.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "kind" => self.kind = SystemKind::parse(value)?,
            "init" => self.init = InitSource::parse(value)?,
            "loss" => self.loss = LossKind::parse(value)?,
            "adaptor" => {
                self.adaptor = (!value.is_empty()).then(|| AdaptorKind::parse(value)).transpose()?
            }
            "ctc_layer_index" => {
                self.ctc_layer_index = (!value.is_empty()).then(|| p(key, value)).transpose()?
            }
            "asr_ckpt" => self.asr_ckpt = path(value),
            "mt_ckpt" => self.mt_ckpt = path(value),
            _ => return Err(SateError::config(format!("unknown recipe key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        vec![
            ("kind", self.kind.name().to_string()),
            ("init", self.init.name().to_string()),
            ("loss", self.loss.name().to_string()),
            ("adaptor", self.adaptor.map_or(String::new(), |a| a.name().to_string())),
            (
                "ctc_layer_index",
                self.ctc_layer_index.map_or(String::new(), |i| i.to_string()),
            ),
            ("asr_ckpt", path(&self.asr_ckpt)),
            ("mt_ckpt", path(&self.mt_ckpt)),
        ]
    }
}

/// Everything one command needs, read from a single key=value file whose
/// keys carry a section prefix: `model.`, `train.`, `recipe.` or `data.`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub recipe: ExperimentRecipe,
    pub data: SynthSpec,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| SateError::config(format!("key {key:?} lacks a section prefix")))?;
        match section {
            "model" => self.model.set(field, value),
            "train" => self.train.set(field, value),
            "recipe" => self.recipe.set(field, value),
            "data" => self.data.set(field, value),
            _ => Err(SateError::config(format!("unknown section {section:?}"))),
        }
    }

    /// Applies a file's settings, then `overrides` (each `key=value`).
    pub fn load(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut s = Settings::default();
        for (k, v) in parse_pairs(text.unwrap_or(""))? {
            if super::manifest::is_annotation(&k) {
                continue;
            }
            s.set(&k, &v)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SateError::config(format!("override {o:?} is not key=value")))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    /// Model configuration with the recipe's overrides applied.
    pub fn resolved_model(&self) -> ModelConfig {
        self.recipe.model_config(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.resolved_model();
        m.validate()?;
        self.train.validate()?;
        self.recipe.validate()?;
        self.data.validate()?;
        if m.vocab_size != self.data.vocab_size + 1 || m.d_feat != self.data.d_feat {
            return Err(SateError::config(format!(
                "model expects {} tokens + blank and {} features; data has {} tokens and {} features",
                m.vocab_size - 1,
                m.d_feat,
                self.data.vocab_size,
                self.data.d_feat
            )));
        }
        Ok(())
    }

    /// Sorted, fully resolved `key=value` text that [`Settings::load`] reads back.
    pub fn to_text(&self) -> Result<String> {
        let mut lines = Vec::new();
        let data = parse_pairs(&self.data.to_text())?;
        for (sec, pairs) in [
            ("data", data),
            ("model", owned(self.model.to_pairs())),
            ("recipe", owned(self.recipe.to_pairs())),
            ("train", owned(self.train.to_pairs())),
        ] {
            for (k, v) in pairs {
                lines.push(format!("{sec}.{k}={v}"));
            }
        }
        Ok(lines.join("\n") + "\n")
    }
}

fn owned(pairs: Vec<(&'static str, String)>) -> Vec<(String, String)> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let text = "# comment\nmodel.d_model = 32\ntrain.epochs=3 # trailing\nrecipe.kind=e2e_st\n\ndata.n_train=10\n";
        let s = Settings::load(Some(text), &["train.epochs=5".into(), "recipe.ctc_layer_index=2".into()]).unwrap();
        assert_eq!(s.model.d_model, 32);
        assert_eq!(s.train.epochs, 5);
        assert_eq!(s.recipe.kind, SystemKind::Model(ModelKind::E2eSt));
        assert_eq!(s.data.n_train, 10);
        assert_eq!(s.resolved_model().ctc_layer_index, 2);
        assert_eq!(s.resolved_model().adaptor, s.model.adaptor);
    }

    #[test]
    fn resolved_text_round_trips() {
        let s = Settings::load(None, &["recipe.adaptor=soft".into(), "train.spec_augment=true".into()]).unwrap();
        let back = Settings::load(Some(&s.to_text().unwrap()), &[]).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Settings::load(Some("d_model=3"), &[]).is_err());
        assert!(Settings::load(Some("model.nope=3"), &[]).is_err());
        assert!(Settings::load(Some("model.d_model"), &[]).is_err());
        assert!(Settings::load(None, &["train.warmup".into()]).is_err());
        let mut s = Settings::default();
        s.train.warmup = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn mtkd_needs_both_teachers() {
        let mut r = ExperimentRecipe {
            loss: LossKind::Mtkd,
            asr_ckpt: Some("a".into()),
            ..Default::default()
        };
        assert!(r.validate().is_err());
        r.mt_ckpt = Some("m".into());
        r.validate().unwrap();
        r.kind = SystemKind::Model(ModelKind::Asr);
        assert!(r.validate().is_err());
    }
}
