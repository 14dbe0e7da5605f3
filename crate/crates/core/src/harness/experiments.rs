use std::io::Write;
use std::path::Path;

use super::config::{InitSource, LossKind, Settings, SystemKind};
use super::eval::{decode_limit, evaluate_examples, System};
use super::train::{train, TrainOutcome};
use crate::analysis::{evaluation_slice, model_report, Group, LocalnessReport, EVAL_SEED, EVAL_UTTERANCES};
use crate::corpus::{Dataset, Example};
use crate::error::{Result, SateError};
use crate::model::{AnyModel, AsrModel, Cascade, Checkpoint, ModelKind, MtModel, PretrainFlags, TeacherBundle};
use crate::nn::{AdaptorKind, ModelConfig};

/// Pre-trained ASR and MT parameters for initialization, distillation or a
/// cascade.
#[derive(Debug, Clone, Default)]
pub struct Pretrained {
    pub asr: Option<Checkpoint>,
    pub mt: Option<Checkpoint>,
}

impl Pretrained {
    /// Reads whichever checkpoints the recipe names.
    pub fn load(settings: &Settings) -> Result<Self> {
        let read = |p: &Option<std::path::PathBuf>| p.as_deref().map(Checkpoint::load).transpose();
        Ok(Pretrained {
            asr: read(&settings.recipe.asr_ckpt)?,
            mt: read(&settings.recipe.mt_ckpt)?,
        })
    }

    fn need(ckpt: &Option<Checkpoint>, what: &str) -> Result<Checkpoint> {
        ckpt.clone()
            .ok_or_else(|| SateError::config(format!("{what} checkpoint required")))
    }

    pub fn asr_model(&self, cfg: &ModelConfig) -> Result<AsrModel> {
        match AnyModel::from_checkpoint(ModelKind::Asr, &asr_config(cfg), &Self::need(&self.asr, "ASR")?)? {
            AnyModel::Asr(m) => Ok(m),
            _ => unreachable!(),
        }
    }

    pub fn mt_model(&self, cfg: &ModelConfig) -> Result<MtModel> {
        match AnyModel::from_checkpoint(ModelKind::Mt, cfg, &Self::need(&self.mt, "MT")?)? {
            AnyModel::Mt(m) => Ok(m),
            _ => unreachable!(),
        }
    }

    pub fn cascade(&self, cfg: &ModelConfig) -> Result<Cascade> {
        Cascade::new(self.asr_model(cfg)?, self.mt_model(cfg)?)
    }

    pub fn teachers(&self, cfg: &ModelConfig) -> Result<TeacherBundle> {
        TeacherBundle::new(self.asr_model(cfg)?, self.mt_model(cfg)?)
    }
}

/// Stand-alone ASR models put their CTC head on the top acoustic layer.
pub fn asr_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        ctc_layer_index: cfg.n_layers_acoustic,
        ..cfg.clone()
    }
}

/// The model kind a recipe trains and the configuration it is built with.
pub fn recipe_model(settings: &Settings) -> Result<(ModelKind, ModelConfig)> {
    let kind = match settings.recipe.kind {
        SystemKind::Model(k) => k,
        SystemKind::Cascade => return Err(SateError::config("a cascade is evaluated, not trained")),
    };
    let cfg = settings.resolved_model();
    Ok(match kind {
        ModelKind::Asr => (kind, asr_config(&cfg)),
        _ => (kind, cfg),
    })
}

/// A trained model with its best checkpoints averaged in.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: AnyModel,
    pub outcome: TrainOutcome,
}

/// Builds, initializes and trains the recipe's model, then loads the
/// average of its best checkpoints.
pub fn run_recipe(settings: &Settings, data: &Dataset, pre: &Pretrained) -> Result<Trained> {
    settings.validate()?;
    let recipe = &settings.recipe;
    let (kind, cfg) = recipe_model(settings)?;
    let mut model = AnyModel::new(kind, &cfg, settings.train.seed)?;
    if recipe.init != InitSource::None {
        let flags = PretrainFlags::NONE
            .with_asr(recipe.init.uses_asr())
            .with_mt_encoder(recipe.init.uses_mt())
            .with_mt_decoder(recipe.init.uses_mt());
        model.init_from_pretrained(pre.asr.as_ref(), pre.mt.as_ref(), flags)?;
    }
    train_and_average(model, settings, data, pre)
}

fn train_and_average(mut model: AnyModel, settings: &Settings, data: &Dataset, pre: &Pretrained) -> Result<Trained> {
    let teachers = match settings.recipe.loss {
        LossKind::Mtkd => Some(pre.teachers(&settings.resolved_model())?),
        LossKind::Sate => None,
    };
    let outcome = train(&mut model, data, &settings.train, teachers.as_ref())?;
    let model = AnyModel::from_checkpoint(model.kind(), model.config(), &outcome.averaged()?)?;
    Ok(Trained { model, outcome })
}

/// Result row of one ablation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub dev_bleu: f64,
    pub test_bleu: f64,
}

fn bleu_row(label: &str, model: &AnyModel, data: &Dataset, beam: usize) -> Result<AblationRow> {
    let max_len = decode_limit(&data.spec);
    let score = |ex: &[Example], split: &str| -> Result<f64> {
        let refs: Vec<&Example> = ex.iter().collect();
        Ok(evaluate_examples(&System::Model(model), split, &refs, beam, max_len)?.value)
    };
    Ok(AblationRow {
        label: label.to_string(),
        dev_bleu: score(&data.dev, "dev")?,
        test_bleu: score(&data.test, "test")?,
    })
}

/// SATE initialized from every subset of pre-trained modules that drops at
/// most one: all, then without the ASR encoder, the MT encoder, the MT
/// decoder, and finally none.
pub fn ablate_pretrain(settings: &Settings, data: &Dataset, pre: &Pretrained, beam: usize) -> Result<Vec<AblationRow>> {
    let variants = [
        ("all", PretrainFlags::ALL),
        ("-asr_enc", PretrainFlags::ALL.with_asr(false)),
        ("-mt_enc", PretrainFlags::ALL.with_mt_encoder(false)),
        ("-mt_dec", PretrainFlags::ALL.with_mt_decoder(false)),
        ("none", PretrainFlags::NONE),
    ];
    let mut settings = settings.clone();
    settings.recipe.kind = SystemKind::Model(ModelKind::Sate);
    settings.recipe.init = InitSource::None;
    settings.validate()?;
    let cfg = settings.resolved_model();
    let mut rows = Vec::new();
    for (label, flags) in variants {
        let mut model = AnyModel::new(ModelKind::Sate, &cfg, settings.train.seed)?;
        model.init_from_pretrained(pre.asr.as_ref(), pre.mt.as_ref(), flags)?;
        let trained = train_and_average(model, &settings, data, pre)?;
        rows.push(bleu_row(label, &trained.model, data, beam)?);
    }
    Ok(rows)
}

/// SATE with each adaptor variant, otherwise as the recipe says.
pub fn ablate_adaptor(settings: &Settings, data: &Dataset, pre: &Pretrained, beam: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for kind in [AdaptorKind::None, AdaptorKind::Soft, AdaptorKind::Mapping, AdaptorKind::Fusion] {
        let mut s = settings.clone();
        s.recipe.kind = SystemKind::Model(ModelKind::Sate);
        s.recipe.adaptor = Some(kind);
        let trained = run_recipe(&s, data, pre)?;
        rows.push(bleu_row(kind.name(), &trained.model, data, beam)?);
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| SateError::format("ablation csv", e.to_string());
    w.write_record(["variant", "dev_bleu", "test_bleu"]).map_err(wrap)?;
    for r in rows {
        w.write_record([r.label.clone(), r.dev_bleu.to_string(), r.test_bleu.to_string()])
            .map_err(wrap)?;
    }
    w.flush()?;
    Ok(())
}

/// One CTC placement of the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub ctc_layer_index: usize,
    pub st_dev_bleu: f64,
    pub asr_dev_wer: f64,
    /// Localness of the E2E ST encoder.
    pub localness: LocalnessReport,
}

impl SweepRow {
    pub fn below(&self) -> Option<f64> {
        self.localness.group_mean(Group::Below)
    }

    pub fn above(&self) -> Option<f64> {
        self.localness.group_mean(Group::Above)
    }
}

/// For each position `k`, trains a vanilla E2E ST model with its CTC head on
/// encoder layer `k` and a `k`-layer CTC ASR model, and measures the ST
/// encoder's localness on the held-out evaluation slice of the dev split.
pub fn run_ctc_position_sweep(settings: &Settings, data: &Dataset, layers: &[usize]) -> Result<Vec<SweepRow>> {
    let max_len = decode_limit(&data.spec);
    let dev: Vec<&Example> = data.dev.iter().take(settings.train.dev_limit).collect();
    let slice = evaluation_slice(&data.dev, EVAL_UTTERANCES, EVAL_SEED);
    let mut rows = Vec::new();
    for &k in layers {
        let mut st = settings.clone();
        st.recipe = Default::default();
        st.recipe.kind = SystemKind::Model(ModelKind::E2eSt);
        st.recipe.ctc_layer_index = Some(k);
        let e2e = run_recipe(&st, data, &Pretrained::default())?;
        let bleu = evaluate_examples(&System::Model(&e2e.model), "dev", &dev, 1, max_len)?.value;

        let mut asr = st.clone();
        asr.recipe.kind = SystemKind::Model(ModelKind::Asr);
        asr.recipe.ctc_layer_index = None;
        asr.model.n_layers_acoustic = k;
        asr.model.ctc_layer_index = k;
        let asr_model = run_recipe(&asr, data, &Pretrained::default())?;
        let wer = evaluate_examples(&System::Model(&asr_model.model), "dev", &dev, 1, max_len)?.value;

        rows.push(SweepRow {
            ctc_layer_index: k,
            st_dev_bleu: bleu,
            asr_dev_wer: wer,
            localness: model_report(&format!("e2e_st@ctc{k}"), &e2e.model, &slice)?,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| SateError::format("sweep csv", e.to_string());
    w.write_record(["ctc_layer_index", "st_dev_bleu", "asr_dev_wer", "localness_below", "localness_above"])
        .map_err(wrap)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        w.write_record([
            r.ctc_layer_index.to_string(),
            r.st_dev_bleu.to_string(),
            r.asr_dev_wer.to_string(),
            opt(r.below()),
            opt(r.above()),
        ])
        .map_err(wrap)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `sweep.csv` and the per-layer `sweep_localness.csv` into `dir`.
pub fn save_sweep(rows: &[SweepRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_sweep_csv(rows, std::fs::File::create(dir.join("sweep.csv"))?)?;
    let reports: Vec<LocalnessReport> = rows.iter().map(|r| r.localness.clone()).collect();
    crate::analysis::write_csv(&reports, std::fs::File::create(dir.join("sweep_localness.csv"))?)
}
