//! Training objectives: the CTC/translation interpolation and its
//! distillation extension.

use super::models::{AsrModel, MtModel, SpeechTranslator, TeacherBundle};
use crate::corpus::Batch;
use crate::error::{Result, SateError};
use crate::numerics::{Tape, Tensor, Var};

/// A batch loss on the tape plus its components for logging. Components are
/// batch means: CTC over feasible utterances, the rest over all of them.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub ctc: Option<f64>,
    pub trans: Option<f64>,
    pub kd_ctc: Option<f64>,
    pub kd_trans: Option<f64>,
    /// Utterances whose CTC loss was infinite and left out of the mean.
    pub infeasible: usize,
}

impl LossBreakdown {
    pub fn value(&self, tape: &Tape) -> f64 {
        tape.scalar_f64(self.total)
    }
}

/// `α·ctc + (1−α)·trans` on plain numbers.
pub fn interpolate(alpha: f64, ctc: f64, trans: f64) -> f64 {
    alpha * ctc + (1.0 - alpha) * trans
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.iter().map(|&v| (v, w)).collect();
    tape.weighted_sum(&weighted).map(Some)
}

fn mix(tape: &mut Tape, a: Option<Var>, b: Var, weight_a: f64) -> Result<Var> {
    match a {
        Some(a) => tape.weighted_sum(&[(a, weight_a), (b, 1.0 - weight_a)]),
        None => tape.weighted_sum(&[(b, 1.0 - weight_a)]),
    }
}

struct Terms {
    ctc: Vec<Var>,
    trans: Vec<Var>,
    kd_ctc: Vec<Var>,
    kd_trans: Vec<Var>,
    infeasible: usize,
}

fn collect<M: SpeechTranslator + ?Sized>(
    model: &M,
    tape: &mut Tape,
    batch: &Batch,
    teachers: Option<&TeacherBundle>,
) -> Result<Terms> {
    let cfg = model.config();
    let mut t = Terms {
        ctc: Vec::new(),
        trans: Vec::new(),
        kd_ctc: Vec::new(),
        kd_trans: Vec::new(),
        infeasible: 0,
    };
    for ex in &batch.examples {
        let f = model.forward(tape, &ex.features, None)?;
        match tape.ctc_nll(f.ctc_log_probs, &ex.source)? {
            Some(c) => t.ctc.push(c),
            None => t.infeasible += 1,
        }
        let (logits, gold) = model.head().forced(tape, model.store(), cfg, f.memory, f.len, &ex.target)?;
        t.trans.push(tape.smoothed_ce(logits, &gold, cfg.label_smoothing)?);
        if let Some(teachers) = teachers {
            let (q_ctc, q_trans) = teachers.targets(ex)?;
            if q_ctc.shape() != tape.value(f.ctc_log_probs).shape() {
                return Err(SateError::Contract(format!(
                    "teacher CTC frames {:?} vs student {:?}",
                    q_ctc.shape(),
                    tape.value(f.ctc_log_probs).shape()
                )));
            }
            t.kd_ctc.push(tape.soft_target_ce(f.ctc_log_probs, &q_ctc)?);
            let lp = tape.log_softmax(logits, 1)?;
            t.kd_trans.push(tape.soft_target_ce(lp, &q_trans)?);
        }
    }
    Ok(t)
}

/// `L = α·L_CTC + (1−α)·L_Trans`.
pub fn loss_sate<M: SpeechTranslator + ?Sized>(model: &M, tape: &mut Tape, batch: &Batch) -> Result<LossBreakdown> {
    let alpha = model.config().alpha;
    let t = collect(model, tape, batch, None)?;
    let ctc = mean(tape, &t.ctc)?;
    let trans = mean(tape, &t.trans)?.expect("non-empty batch");
    let total = mix(tape, ctc, trans, alpha)?;
    Ok(LossBreakdown {
        total,
        ctc: ctc.map(|v| tape.scalar_f64(v)),
        trans: Some(tape.scalar_f64(trans)),
        kd_ctc: None,
        kd_trans: None,
        infeasible: t.infeasible,
    })
}

/// `L = α·(β·L_CTC + (1−β)·L_KD_CTC) + (1−α)·(γ·L_Trans + (1−γ)·L_KD_Trans)`.
pub fn loss_mtkd<M: SpeechTranslator + ?Sized>(
    model: &M,
    tape: &mut Tape,
    batch: &Batch,
    teachers: &TeacherBundle,
) -> Result<LossBreakdown> {
    let cfg = model.config();
    if teachers.asr().cfg.vocab_size != cfg.vocab_size {
        return Err(SateError::config("teacher and student vocabularies differ"));
    }
    let t = collect(model, tape, batch, Some(teachers))?;
    let ctc = mean(tape, &t.ctc)?;
    let trans = mean(tape, &t.trans)?.expect("non-empty batch");
    let kd_ctc = mean(tape, &t.kd_ctc)?.expect("non-empty batch");
    let kd_trans = mean(tape, &t.kd_trans)?.expect("non-empty batch");
    let ctc_side = match ctc {
        Some(c) => tape.weighted_sum(&[(c, cfg.beta), (kd_ctc, 1.0 - cfg.beta)])?,
        None => tape.weighted_sum(&[(kd_ctc, 1.0 - cfg.beta)])?,
    };
    let trans_side = tape.weighted_sum(&[(trans, cfg.gamma), (kd_trans, 1.0 - cfg.gamma)])?;
    let total = tape.weighted_sum(&[(ctc_side, cfg.alpha), (trans_side, 1.0 - cfg.alpha)])?;
    Ok(LossBreakdown {
        total,
        ctc: ctc.map(|v| tape.scalar_f64(v)),
        trans: Some(tape.scalar_f64(trans)),
        kd_ctc: Some(tape.scalar_f64(kd_ctc)),
        kd_trans: Some(tape.scalar_f64(kd_trans)),
        infeasible: t.infeasible,
    })
}

/// Mean CTC loss of an acoustic-only model.
pub fn loss_asr(model: &AsrModel, tape: &mut Tape, batch: &Batch) -> Result<LossBreakdown> {
    let mut ctcs = Vec::new();
    let mut infeasible = 0;
    for ex in &batch.examples {
        let out = model.forward(tape, &ex.features, None)?;
        match tape.ctc_nll(out.ctc_log_probs, &ex.source)? {
            Some(c) => ctcs.push(c),
            None => infeasible += 1,
        }
    }
    let total = match mean(tape, &ctcs)? {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let ctc = (!ctcs.is_empty()).then(|| tape.scalar_f64(total));
    Ok(LossBreakdown {
        total,
        ctc,
        trans: None,
        kd_ctc: None,
        kd_trans: None,
        infeasible,
    })
}

/// Mean label-smoothed translation loss of a text model.
pub fn loss_mt(model: &MtModel, tape: &mut Tape, batch: &Batch) -> Result<LossBreakdown> {
    let mut terms = Vec::new();
    for ex in &batch.examples {
        let memory = model.encode(tape, &ex.source, None)?;
        terms.push(model.head.loss(tape, &model.store, &model.cfg, memory, ex.source.len(), &ex.target)?);
    }
    let total = mean(tape, &terms)?.expect("non-empty batch");
    Ok(LossBreakdown {
        total,
        ctc: None,
        trans: Some(tape.scalar_f64(total)),
        kd_ctc: None,
        kd_trans: None,
        infeasible: 0,
    })
}
