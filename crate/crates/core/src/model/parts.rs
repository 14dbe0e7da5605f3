//! Sub-networks shared by several model kinds.

use rand::Rng;

use super::search::{beam_search, greedy_search, Hypothesis, EOS};
use crate::ctc::CtcHead;
use crate::error::{Result, SateError};
use crate::nn::{add_positions, AttentionTrace, ConvFrontend, DecoderStack, EncoderStack, ModelConfig, ParamStore, TokenEmbedding};
use crate::numerics::{Tape, Tensor, Var};

pub(crate) fn check_len(cfg: &ModelConfig, len: usize, what: &str) -> Result<()> {
    if len > cfg.max_seq_len {
        return Err(SateError::dim(
            "sequence",
            format!("{what} length {len} exceeds max_seq_len {}", cfg.max_seq_len),
        ));
    }
    Ok(())
}

/// Result of running speech features through frontend, encoder and CTC head.
#[derive(Debug, Clone, Copy)]
pub struct AcousticOutput {
    /// Top encoder output `[T×d]`.
    pub states: Var,
    /// CTC head scores `[T×C]` from the tapped layer.
    pub ctc_logits: Var,
    pub ctc_log_probs: Var,
    /// Frames after downsampling.
    pub len: usize,
}

/// Conv frontend, encoder stack, and a CTC head on one of its layers.
#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub(crate) frontend: ConvFrontend,
    pub(crate) encoder: EncoderStack,
    pub(crate) ctc: CtcHead,
    ctc_layer: usize,
}

impl AcousticEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, stack: &str, depth: usize) -> Self {
        AcousticEncoder {
            frontend: ConvFrontend::new(store, rng, "frontend", cfg.d_feat, cfg.d_model),
            encoder: EncoderStack::new(store, rng, stack, depth, cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.dropout),
            ctc: CtcHead::new(store, rng, "ctc", cfg.d_model, cfg.vocab_size),
            ctc_layer: cfg.ctc_layer_index,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder.depth()
    }

    pub fn ctc_layer(&self) -> usize {
        self.ctc_layer
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        x: &Tensor,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<AcousticOutput> {
        if x.cols() != cfg.d_feat {
            return Err(SateError::dim("features", format!("width {} vs d_feat {}", x.cols(), cfg.d_feat)));
        }
        let len = ConvFrontend::output_len(x.rows());
        check_len(cfg, len, "encoder")?;
        let xv = tape.constant(x.clone());
        let h = self.frontend.forward(tape, store, xv)?;
        let h = add_positions(tape, h)?;
        let h = tape.dropout(h, cfg.dropout)?;
        let out = self.encoder.forward(tape, store, h, len, Some(self.ctc_layer), trace)?;
        let tapped = out.tapped.expect("ctc layer within depth");
        let ctc_logits = self.ctc.logits(tape, store, tapped)?;
        let ctc_log_probs = tape.log_softmax(ctc_logits, 1)?;
        Ok(AcousticOutput {
            states: out.output,
            ctc_logits,
            ctc_log_probs,
            len,
        })
    }
}

/// Embeds `tokens`, adds positions, and runs `stack`.
pub(crate) fn encode_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    embed: &TokenEmbedding,
    stack: &EncoderStack,
    tokens: &[usize],
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(SateError::dim("encode_tokens", "empty source"));
    }
    check_len(cfg, tokens.len(), "source")?;
    let x = embed.tokens(tape, store, tokens)?;
    encode_embedded(tape, store, cfg, stack, x, tokens.len(), trace)
}

/// Adds positions to `x: [L×d]` and runs `stack`.
pub(crate) fn encode_embedded(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    stack: &EncoderStack,
    x: Var,
    len: usize,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let h = add_positions(tape, x)?;
    let h = tape.dropout(h, cfg.dropout)?;
    Ok(stack.forward(tape, store, h, len, None, trace)?.output)
}

/// Tied embedding plus autoregressive decoder.
#[derive(Debug, Clone)]
pub struct TranslationHead {
    pub(crate) embed: TokenEmbedding,
    pub(crate) decoder: DecoderStack,
}

impl TranslationHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        TranslationHead {
            embed: TokenEmbedding::new(store, rng, "embed", cfg.num_tokens(), cfg.d_model),
            decoder: DecoderStack::new(
                store,
                rng,
                "decoder",
                cfg.n_layers_decoder,
                cfg.d_model,
                cfg.n_heads,
                cfg.d_ffn,
                cfg.dropout,
            ),
        }
    }

    /// Scores `[(|prefix|+1)×C]` for every next position given `prefix`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        memory: Var,
        memory_len: usize,
        prefix: &[usize],
    ) -> Result<Var> {
        check_len(cfg, prefix.len() + 1, "target")?;
        let y = self.embed.decoder_input(tape, store, prefix)?;
        let y = tape.dropout(y, cfg.dropout)?;
        let h = self.decoder.forward(tape, store, y, memory, memory_len)?;
        self.embed.logits(tape, store, h)
    }

    /// Teacher-forced logits and the output ids `target ++ [EOS]`.
    pub fn forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        memory: Var,
        memory_len: usize,
        target: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        let logits = self.logits(tape, store, cfg, memory, memory_len, target)?;
        let mut gold = target.to_vec();
        gold.push(EOS);
        Ok((logits, gold))
    }

    /// Label-smoothed translation loss summed over target positions.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &ModelConfig,
        memory: Var,
        memory_len: usize,
        target: &[usize],
    ) -> Result<Var> {
        let (logits, gold) = self.forced(tape, store, cfg, memory, memory_len, target)?;
        tape.smoothed_ce(logits, &gold, cfg.label_smoothing)
    }

    /// Teacher-forced next-token distributions `[(|target|+1)×C]` on an
    /// evaluation tape.
    pub fn distributions(&self, store: &ParamStore, cfg: &ModelConfig, memory: &Tensor, target: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = tape.constant(memory.clone());
        let z = self.logits(&mut tape, store, cfg, m, memory.rows(), target)?;
        let p = tape.softmax(z, 1)?;
        Ok(tape.value(p).clone())
    }

    fn step_fn<'a>(&'a self, store: &'a ParamStore, cfg: &'a ModelConfig, memory: &'a Tensor) -> impl FnMut(&[usize]) -> Result<Vec<f32>> + 'a {
        move |prefix: &[usize]| {
            let mut tape = Tape::new();
            let m = tape.constant(memory.clone());
            let z = self.logits(&mut tape, store, cfg, m, memory.rows(), prefix)?;
            let lp = tape.log_softmax(z, 1)?;
            Ok(tape.value(lp).row(prefix.len()).to_vec())
        }
    }

    fn cap(cfg: &ModelConfig, max_len: usize) -> usize {
        max_len.min(cfg.max_seq_len.saturating_sub(1)).max(1)
    }

    /// Beam search against a fixed encoder memory.
    pub fn search(&self, store: &ParamStore, cfg: &ModelConfig, memory: &Tensor, beam: usize, max_len: usize) -> Result<Hypothesis> {
        beam_search(&mut self.step_fn(store, cfg, memory), beam, Self::cap(cfg, max_len))
    }

    pub fn greedy(&self, store: &ParamStore, cfg: &ModelConfig, memory: &Tensor, max_len: usize) -> Result<Hypothesis> {
        greedy_search(&mut self.step_fn(store, cfg, memory), Self::cap(cfg, max_len))
    }
}
