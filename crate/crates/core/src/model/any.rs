use super::checkpoint::Checkpoint;
use super::loss::{loss_asr, loss_mt, loss_mtkd, loss_sate, LossBreakdown};
use super::models::{AsrModel, E2eModel, ModelKind, MtModel, SateModel, SpeechTranslator, TeacherBundle};
use super::pretrain::PretrainFlags;
use super::search::Hypothesis;
use crate::corpus::{Batch, Example};
use crate::error::{Result, SateError};
use crate::nn::{AttentionTrace, ModelConfig, ParamStore};
use crate::numerics::{grad_check, GradCheckReport, Tape, Tensor};

/// Any trainable model kind behind one interface.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Asr(AsrModel),
    Mt(MtModel),
    E2e(E2eModel),
    Sate(SateModel),
}

impl AnyModel {
    pub fn new(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Asr => AnyModel::Asr(AsrModel::new(cfg, seed)?),
            ModelKind::Mt => AnyModel::Mt(MtModel::new(cfg, seed)?),
            ModelKind::E2eSt => AnyModel::E2e(E2eModel::new(cfg, seed)?),
            ModelKind::Sate => AnyModel::Sate(SateModel::new(cfg, seed)?),
        })
    }

    pub fn from_checkpoint(kind: ModelKind, cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(kind, cfg, 0)?;
        ckpt.load_into(m.store_mut())?;
        Ok(m)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Asr(_) => ModelKind::Asr,
            AnyModel::Mt(_) => ModelKind::Mt,
            AnyModel::E2e(_) => ModelKind::E2eSt,
            AnyModel::Sate(_) => ModelKind::Sate,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Asr(m) => &m.cfg,
            AnyModel::Mt(m) => &m.cfg,
            AnyModel::E2e(m) => &m.cfg,
            AnyModel::Sate(m) => &m.cfg,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Asr(m) => &m.store,
            AnyModel::Mt(m) => &m.store,
            AnyModel::E2e(m) => &m.store,
            AnyModel::Sate(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Asr(m) => &mut m.store,
            AnyModel::Mt(m) => &mut m.store,
            AnyModel::E2e(m) => &mut m.store,
            AnyModel::Sate(m) => &mut m.store,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.store())
    }

    /// Training loss for one batch. `teachers` switches speech translation
    /// models to the distillation objective.
    pub fn loss(&self, tape: &mut Tape, batch: &Batch, teachers: Option<&TeacherBundle>) -> Result<LossBreakdown> {
        match (self, teachers) {
            (AnyModel::Asr(m), None) => loss_asr(m, tape, batch),
            (AnyModel::Mt(m), None) => loss_mt(m, tape, batch),
            (AnyModel::E2e(m), None) => loss_sate(m, tape, batch),
            (AnyModel::Sate(m), None) => loss_sate(m, tape, batch),
            (AnyModel::E2e(m), Some(t)) => loss_mtkd(m, tape, batch, t),
            (AnyModel::Sate(m), Some(t)) => loss_mtkd(m, tape, batch, t),
            (other, Some(_)) => Err(SateError::config(format!(
                "distillation applies to speech translation models, not {}",
                other.kind().name()
            ))),
        }
    }

    /// Transcript for ASR, translation otherwise.
    pub fn decode(&self, ex: &Example, beam: usize, max_len: usize) -> Result<Hypothesis> {
        match self {
            AnyModel::Asr(m) => Ok(Hypothesis {
                tokens: m.transcribe(&ex.features)?,
                log_prob: 0.0,
                truncated: false,
            }),
            AnyModel::Mt(m) => m.translate(&ex.source, beam, max_len),
            AnyModel::E2e(m) => m.translate(&ex.features, beam, max_len),
            AnyModel::Sate(m) => m.translate(&ex.features, beam, max_len),
        }
    }

    /// Reference the decoder output is scored against.
    pub fn reference<'a>(&self, ex: &'a Example) -> &'a [usize] {
        if self.kind().translates() {
            &ex.target
        } else {
            &ex.source
        }
    }

    pub fn encoder_trace(&self, ex: &Example) -> Result<AttentionTrace> {
        match self {
            AnyModel::Asr(m) => m.encoder_trace(&ex.features),
            AnyModel::Mt(m) => m.encoder_trace(&ex.source),
            AnyModel::E2e(m) => m.encoder_trace(&ex.features),
            AnyModel::Sate(m) => m.encoder_trace(&ex.features),
        }
    }

    /// Loads pre-trained parts; only meaningful for the speech translation
    /// kinds.
    pub fn init_from_pretrained(
        &mut self,
        asr: Option<&Checkpoint>,
        mt: Option<&Checkpoint>,
        flags: PretrainFlags,
    ) -> Result<()> {
        match self {
            AnyModel::E2e(m) => m.init_from_pretrained(asr, mt, flags),
            AnyModel::Sate(m) => m.init_from_pretrained(asr, mt, flags),
            other if !flags.any() => {
                let _ = other;
                Ok(())
            }
            other => Err(SateError::config(format!(
                "pre-trained initialization does not apply to {}",
                other.kind().name()
            ))),
        }
    }

    /// Finite-difference check of the full training loss with respect to
    /// every parameter, on evaluation tapes.
    pub fn grad_check_loss(
        &self,
        batch: &Batch,
        teachers: Option<&TeacherBundle>,
        h: f64,
        tol: f64,
    ) -> Result<GradCheckReport> {
        let point: Vec<Tensor> = self.store().iter().map(|(_, t)| t.clone()).collect();
        grad_check(
            |tape, vars| {
                self.store().bind_to(tape, vars)?;
                Ok(self.loss(tape, batch, teachers)?.total)
            },
            &point,
            h,
            tol,
        )
    }
}
