//! Pre-norm Transformer blocks.

use rand::Rng;

use super::params::{normal, xavier, ParamId, ParamStore};
use super::trace::{AttentionTrace, LayerAttention};
use crate::error::Result;
use crate::numerics::{AttnMask, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), xavier(rng, d_in, d_out)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.w);
        let b = store.bind(tape, self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    dropout: f32,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, d_ffn: usize, dropout: f32) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), d, d_ffn),
            down: Linear::new(store, rng, &format!("{name}.down"), d_ffn, d),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.dropout)?;
        self.down.forward(tape, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    /// Attends from `query` rows to `memory` rows. When `trace` is given,
    /// the normalized weights are appended as one layer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: AttnMask,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let ctx = tape.attention(q, k, v, self.heads, mask)?;
        if let Some(trace) = trace {
            let (weights, heads) = tape.attention_weights(ctx).expect("attention node");
            trace.layers.push(LayerAttention {
                heads,
                queries: tape.value(q).rows(),
                keys: tape.value(k).rows(),
                weights: weights.to_vec(),
            });
        }
        self.out.forward(tape, store, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    dropout: f32,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, d_ffn: usize, dropout: f32) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d_ffn, dropout),
            dropout,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        valid_len: usize,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let mask = AttnMask {
            key_len: valid_len,
            causal: false,
        };
        let a = self.ln_attn.forward(tape, store, h)?;
        let a = self.attn.forward(tape, store, a, a, mask, trace)?;
        let a = tape.dropout(a, self.dropout)?;
        let h = tape.add(h, a)?;
        let f = self.ln_ffn.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, f)?;
        let f = tape.dropout(f, self.dropout)?;
        tape.add(h, f)
    }
}

/// Output of an [`EncoderStack`] pass.
#[derive(Debug, Clone, Copy)]
pub struct StackOutput {
    /// Top layer output after the final layer norm.
    pub output: Var,
    /// Raw output of the tapped layer, if one was requested.
    pub tapped: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        n_layers: usize,
        d: usize,
        heads: usize,
        d_ffn: usize,
        dropout: f32,
    ) -> Self {
        EncoderStack {
            layers: (0..n_layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layers.{i}"), d, heads, d_ffn, dropout))
                .collect(),
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), d),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs every layer. `tap` is a 1-based layer index whose raw output is
    /// returned alongside the normalized top output.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        valid_len: usize,
        tap: Option<usize>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<StackOutput> {
        let mut h = x;
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h, valid_len, trace.as_deref_mut())?;
            if tap == Some(i + 1) {
                tapped = Some(h);
            }
        }
        let output = self.final_ln.forward(tape, store, h)?;
        Ok(StackOutput { output, tapped })
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    dropout: f32,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, d_ffn: usize, dropout: f32) -> Self {
        DecoderLayer {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, heads),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d, heads),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d, d_ffn, dropout),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var, memory: Var, memory_len: usize) -> Result<Var> {
        let y_len = tape.value(y).rows();
        let causal = AttnMask {
            key_len: y_len,
            causal: true,
        };
        let cross = AttnMask {
            key_len: memory_len,
            causal: false,
        };
        let a = self.ln_self.forward(tape, store, y)?;
        let a = self.self_attn.forward(tape, store, a, a, causal, None)?;
        let a = tape.dropout(a, self.dropout)?;
        let y = tape.add(y, a)?;
        let c = self.ln_cross.forward(tape, store, y)?;
        let c = self.cross_attn.forward(tape, store, c, memory, cross, None)?;
        let c = tape.dropout(c, self.dropout)?;
        let y = tape.add(y, c)?;
        let f = self.ln_ffn.forward(tape, store, y)?;
        let f = self.ffn.forward(tape, store, f)?;
        let f = tape.dropout(f, self.dropout)?;
        tape.add(y, f)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
}

impl DecoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        n_layers: usize,
        d: usize,
        heads: usize,
        d_ffn: usize,
        dropout: f32,
    ) -> Self {
        DecoderStack {
            layers: (0..n_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("{name}.layers.{i}"), d, heads, d_ffn, dropout))
                .collect(),
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var, memory: Var, memory_len: usize) -> Result<Var> {
        let mut h = y;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, memory, memory_len)?;
        }
        self.final_ln.forward(tape, store, h)
    }
}

/// Sinusoidal position table `[length × d]`.
pub fn positional_encoding(length: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[length, d], |idx| {
        let (pos, i) = (idx / d, idx % d);
        let rate = 1.0 / 10000f64.powf((i - i % 2) as f64 / d as f64);
        let angle = pos as f64 * rate;
        (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
    })
}

/// Adds the position table to `x: [L×d]`.
pub fn add_positions(tape: &mut Tape, x: Var) -> Result<Var> {
    let (len, d) = tape.value(x).dims2();
    let pe = tape.constant(positional_encoding(len, d));
    tape.add(x, pe)
}

/// Shared token embedding `W^e` (one row per real token) plus the decoder's
/// begin/end-of-sentence vectors. Token id `k ≥ 1` maps to row `k − 1`;
/// decoder id 0 is BOS on input and EOS on output.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    pub(crate) table: ParamId,
    bos: ParamId,
    eos: ParamId,
    d: usize,
}

impl TokenEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, num_tokens: usize, d: usize) -> Self {
        TokenEmbedding {
            table: store.add(format!("{name}.weight"), normal(rng, &[num_tokens, d], 1.0)),
            bos: store.add(format!("{name}.bos"), normal(rng, &[1, d], 1.0)),
            eos: store.add(format!("{name}.eos"), normal(rng, &[1, d], 1.0)),
            d,
        }
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    /// Embeds token ids (all ≥ 1).
    pub fn tokens(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = ids
            .iter()
            .map(|&id| id.checked_sub(1).ok_or(crate::SateError::Index {
                what: "token embedding",
                index: id,
                size: 0,
            }))
            .collect::<Result<_>>()?;
        let table = store.bind(tape, self.table);
        tape.embed(table, &rows)
    }

    /// Decoder input: BOS followed by `prefix`, with positions added.
    pub fn decoder_input(&self, tape: &mut Tape, store: &ParamStore, prefix: &[usize]) -> Result<Var> {
        let bos = store.bind(tape, self.bos);
        let x = if prefix.is_empty() {
            bos
        } else {
            let toks = self.tokens(tape, store, prefix)?;
            tape.concat_rows(bos, toks)?
        };
        add_positions(tape, x)
    }

    /// Tied output head: logits over `{EOS} ∪ tokens`, EOS at column 0.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let eos = store.bind(tape, self.eos);
        let table = store.bind(tape, self.table);
        let eos_col = tape.matmul_bt(h, eos)?;
        let tok = tape.matmul_bt(h, table)?;
        let z = tape.concat_cols(eos_col, tok)?;
        tape.scale(z, 1.0 / (self.d as f32).sqrt())
    }
}
