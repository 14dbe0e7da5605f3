use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adaptor::Adaptor;
use super::parts::{encode_embedded, encode_tokens, AcousticEncoder, AcousticOutput, TranslationHead};
use super::search::Hypothesis;
use crate::corpus::Example;
use crate::ctc;
use crate::error::{Result, SateError};
use crate::nn::{AttentionTrace, EncoderStack, ModelConfig, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Asr,
    Mt,
    E2eSt,
    Sate,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Asr => "asr",
            ModelKind::Mt => "mt",
            ModelKind::E2eSt => "e2e_st",
            ModelKind::Sate => "sate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "asr" => ModelKind::Asr,
            "mt" => ModelKind::Mt,
            "e2e_st" | "e2e" => ModelKind::E2eSt,
            "sate" => ModelKind::Sate,
            other => return Err(SateError::config(format!("unknown model kind {other:?}"))),
        })
    }

    /// Whether the model reads speech features (as opposed to source tokens).
    pub fn reads_speech(self) -> bool {
        !matches!(self, ModelKind::Mt)
    }

    /// Whether the model's output is a translation (as opposed to a transcript).
    pub fn translates(self) -> bool {
        !matches!(self, ModelKind::Asr)
    }
}

/// Per-utterance outputs of a speech translation model.
#[derive(Debug, Clone, Copy)]
pub struct StForward {
    pub ctc_log_probs: Var,
    pub ctc_logits: Var,
    /// Encoder memory handed to the decoder.
    pub memory: Var,
    pub len: usize,
}

/// Models with an acoustic encoder, a CTC head and a decoder.
pub trait SpeechTranslator {
    fn config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn head(&self) -> &TranslationHead;
    fn forward(&self, tape: &mut Tape, x: &Tensor, trace: Option<&mut AttentionTrace>) -> Result<StForward>;

    fn translate(&self, x: &Tensor, beam: usize, max_len: usize) -> Result<Hypothesis> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, None)?;
        let memory = tape.value(f.memory).clone();
        self.head().search(self.store(), self.config(), &memory, beam, max_len)
    }

    fn transcribe(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, None)?;
        Ok(ctc::ctc_greedy_decode(tape.value(f.ctc_log_probs)))
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ── ASR ───────────────────────────────────────────────────────────────

/// Acoustic encoder trained with CTC alone.
#[derive(Debug, Clone)]
pub struct AsrModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) acoustic: AcousticEncoder,
}

impl AsrModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed);
        let acoustic = AcousticEncoder::new(&mut store, &mut rng, cfg, "acoustic", cfg.n_layers_acoustic);
        Ok(AsrModel {
            cfg: cfg.clone(),
            store,
            acoustic,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, trace: Option<&mut AttentionTrace>) -> Result<AcousticOutput> {
        self.acoustic.forward(tape, &self.store, &self.cfg, x, trace)
    }

    pub fn transcribe(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, None)?;
        Ok(ctc::ctc_greedy_decode(tape.value(out.ctc_log_probs)))
    }

    /// Teacher CTC posteriors `Q(π_m | x)`, `[T×C]`.
    pub fn ctc_distribution(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, None)?;
        let p = tape.softmax(out.ctc_logits, 1)?;
        Ok(tape.value(p).clone())
    }

    pub fn encoder_trace(&self, x: &Tensor) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let mut trace = AttentionTrace::new(crate::nn::ConvFrontend::output_len(x.rows()));
        self.forward(&mut tape, x, Some(&mut trace))?;
        Ok(trace)
    }
}

// ── MT ────────────────────────────────────────────────────────────────

/// Text encoder-decoder over source token ids.
#[derive(Debug, Clone)]
pub struct MtModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) head: TranslationHead,
    pub(crate) encoder: EncoderStack,
}

impl MtModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed);
        let head = TranslationHead::new(&mut store, &mut rng, cfg);
        let encoder = EncoderStack::new(
            &mut store,
            &mut rng,
            "textual",
            cfg.n_layers_textual,
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ffn,
            cfg.dropout,
        );
        Ok(MtModel {
            cfg: cfg.clone(),
            store,
            head,
            encoder,
        })
    }

    pub fn head(&self) -> &TranslationHead {
        &self.head
    }

    pub fn encode(&self, tape: &mut Tape, source: &[usize], trace: Option<&mut AttentionTrace>) -> Result<Var> {
        encode_tokens(tape, &self.store, &self.cfg, &self.head.embed, &self.encoder, source, trace)
    }

    pub fn translate(&self, source: &[usize], beam: usize, max_len: usize) -> Result<Hypothesis> {
        let mut tape = Tape::new();
        let m = self.encode(&mut tape, source, None)?;
        let memory = tape.value(m).clone();
        self.head.search(&self.store, &self.cfg, &memory, beam, max_len)
    }

    /// Teacher next-token distributions `Q(y^t_n | y^s, y^t_<n)`, forced on
    /// the ground truth, `[(|target|+1)×C]`.
    pub fn next_token_distributions(&self, source: &[usize], target: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.encode(&mut tape, source, None)?;
        let memory = tape.value(m).clone();
        self.head.distributions(&self.store, &self.cfg, &memory, target)
    }

    pub fn encoder_trace(&self, source: &[usize]) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let mut trace = AttentionTrace::new(source.len());
        self.encode(&mut tape, source, Some(&mut trace))?;
        Ok(trace)
    }
}

// ── vanilla end-to-end ST ─────────────────────────────────────────────

/// One deep encoder (acoustic + textual depth) with a CTC head and a decoder.
#[derive(Debug, Clone)]
pub struct E2eModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) acoustic: AcousticEncoder,
    pub(crate) head: TranslationHead,
}

impl E2eModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed);
        let depth = cfg.n_layers_acoustic + cfg.n_layers_textual;
        let acoustic = AcousticEncoder::new(&mut store, &mut rng, cfg, "encoder", depth);
        let head = TranslationHead::new(&mut store, &mut rng, cfg);
        Ok(E2eModel {
            cfg: cfg.clone(),
            store,
            acoustic,
            head,
        })
    }

    pub fn encoder_trace(&self, x: &Tensor) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let mut trace = AttentionTrace::new(crate::nn::ConvFrontend::output_len(x.rows()));
        self.forward(&mut tape, x, Some(&mut trace))?;
        Ok(trace)
    }
}

impl SpeechTranslator for E2eModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn head(&self) -> &TranslationHead {
        &self.head
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, trace: Option<&mut AttentionTrace>) -> Result<StForward> {
        let a = self.acoustic.forward(tape, &self.store, &self.cfg, x, trace)?;
        Ok(StForward {
            ctc_log_probs: a.ctc_log_probs,
            ctc_logits: a.ctc_logits,
            memory: a.states,
            len: a.len,
        })
    }
}

// ── SATE ──────────────────────────────────────────────────────────────

/// Acoustic encoder with CTC, adaptor, textual encoder and decoder.
#[derive(Debug, Clone)]
pub struct SateModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) acoustic: AcousticEncoder,
    pub(crate) adaptor: Adaptor,
    pub(crate) textual: EncoderStack,
    pub(crate) head: TranslationHead,
}

/// Intermediate SATE activations for one utterance.
#[derive(Debug, Clone, Copy)]
pub struct SateActivations {
    pub acoustic: AcousticOutput,
    pub posteriors: Var,
    pub adapted: Var,
    pub textual: Var,
}

impl SateModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed);
        let acoustic = AcousticEncoder::new(&mut store, &mut rng, cfg, "acoustic", cfg.n_layers_acoustic);
        let adaptor = Adaptor::new(&mut store, &mut rng, "adaptor", cfg);
        let head = TranslationHead::new(&mut store, &mut rng, cfg);
        let textual = EncoderStack::new(
            &mut store,
            &mut rng,
            "textual",
            cfg.n_layers_textual,
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ffn,
            cfg.dropout,
        );
        Ok(SateModel {
            cfg: cfg.clone(),
            store,
            acoustic,
            adaptor,
            textual,
            head,
        })
    }

    pub fn adaptor(&self) -> &Adaptor {
        &self.adaptor
    }

    pub fn activations(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<SateActivations> {
        let acoustic = self.acoustic.forward(tape, &self.store, &self.cfg, x, trace.as_deref_mut())?;
        let posteriors = tape.softmax(acoustic.ctc_logits, 1)?;
        let table = self.store.bind(tape, self.head.embed.table());
        let adapted = self.adaptor.forward(tape, &self.store, acoustic.states, posteriors, table)?;
        if tape.value(adapted).rows() != acoustic.len {
            return Err(SateError::Contract("adaptor changed the sequence length".into()));
        }
        let textual = encode_embedded(tape, &self.store, &self.cfg, &self.textual, adapted, acoustic.len, trace)?;
        Ok(SateActivations {
            acoustic,
            posteriors,
            adapted,
            textual,
        })
    }

    /// Textual encoder applied to token embeddings, exactly as the MT
    /// encoder it was initialized from.
    pub fn encode_tokens(&self, tape: &mut Tape, source: &[usize]) -> Result<Var> {
        encode_tokens(tape, &self.store, &self.cfg, &self.head.embed, &self.textual, source, None)
    }

    /// Traces of the acoustic layers followed by the textual layers.
    pub fn encoder_trace(&self, x: &Tensor) -> Result<AttentionTrace> {
        let mut tape = Tape::new();
        let mut trace = AttentionTrace::new(crate::nn::ConvFrontend::output_len(x.rows()));
        self.activations(&mut tape, x, Some(&mut trace))?;
        Ok(trace)
    }
}

impl SpeechTranslator for SateModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn head(&self) -> &TranslationHead {
        &self.head
    }

    fn forward(&self, tape: &mut Tape, x: &Tensor, trace: Option<&mut AttentionTrace>) -> Result<StForward> {
        let a = self.activations(tape, x, trace)?;
        Ok(StForward {
            ctc_log_probs: a.acoustic.ctc_log_probs,
            ctc_logits: a.acoustic.ctc_logits,
            memory: a.textual,
            len: a.acoustic.len,
        })
    }
}

// ── cascade and teachers ──────────────────────────────────────────────

/// ASR greedy transcript fed to MT.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub asr: AsrModel,
    pub mt: MtModel,
}

impl Cascade {
    pub fn new(asr: AsrModel, mt: MtModel) -> Result<Self> {
        if asr.cfg.vocab_size != mt.cfg.vocab_size {
            return Err(SateError::config("ASR and MT vocabularies differ"));
        }
        Ok(Cascade { asr, mt })
    }

    pub fn translate(&self, x: &Tensor, beam: usize, max_len: usize) -> Result<Hypothesis> {
        let source = self.asr.transcribe(x)?;
        if source.is_empty() {
            return Ok(Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                truncated: false,
            });
        }
        self.mt.translate(&source, beam, max_len)
    }
}

/// Frozen ASR and MT models supplying distillation targets.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    asr: AsrModel,
    mt: MtModel,
}

impl TeacherBundle {
    pub fn new(mut asr: AsrModel, mut mt: MtModel) -> Result<Self> {
        if asr.cfg.vocab_size != mt.cfg.vocab_size {
            return Err(SateError::config("teacher vocabularies differ"));
        }
        asr.store.freeze();
        mt.store.freeze();
        Ok(TeacherBundle { asr, mt })
    }

    pub fn asr(&self) -> &AsrModel {
        &self.asr
    }

    pub fn mt(&self) -> &MtModel {
        &self.mt
    }

    pub(crate) fn targets(&self, ex: &Example) -> Result<(Tensor, Tensor)> {
        let q_ctc = self.asr.ctc_distribution(&ex.features)?;
        let q_trans = self.mt.next_token_distributions(&ex.source, &ex.target)?;
        Ok((q_ctc, q_trans))
    }
}
