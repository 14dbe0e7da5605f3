use std::time::Instant;

use crate::corpus::{bleu4, corpus_wer, Dataset, Example, SynthSpec};
use crate::error::Result;
use crate::model::{AnyModel, Cascade, Hypothesis};

/// Decoding length cap for a corpus: twice its longest sentence.
pub fn decode_limit(spec: &SynthSpec) -> usize {
    2 * spec.max_len + 2
}

/// Anything that can be scored on a split.
pub enum System<'a> {
    Model(&'a AnyModel),
    Cascade(&'a Cascade),
}

impl System<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            System::Model(m) => m.kind().name(),
            System::Cascade(_) => "cascade",
        }
    }

    fn translates(&self) -> bool {
        match self {
            System::Model(m) => m.kind().translates(),
            System::Cascade(_) => true,
        }
    }

    fn decode(&self, ex: &Example, beam: usize, max_len: usize) -> Result<Hypothesis> {
        match self {
            System::Model(m) => m.decode(ex, beam, max_len),
            System::Cascade(c) => c.translate(&ex.features, beam, max_len),
        }
    }

    fn reference<'e>(&self, ex: &'e Example) -> &'e [usize] {
        if self.translates() {
            &ex.target
        } else {
            &ex.source
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub system: String,
    pub split: String,
    pub beam: usize,
    /// `"bleu"` or `"wer"`.
    pub metric: &'static str,
    pub value: f64,
    pub n: usize,
    pub mean_decode_ms: f64,
}

/// Decodes every example and scores the corpus. ASR is scored by WER and
/// ignores `beam`; the cascade runs greedy ASR into MT with `beam`.
pub fn evaluate_examples(
    system: &System<'_>,
    split: &str,
    examples: &[&Example],
    beam: usize,
    max_len: usize,
) -> Result<EvalRecord> {
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    let start = Instant::now();
    for ex in examples {
        hyps.push(system.decode(ex, beam, max_len)?.tokens);
        refs.push(system.reference(ex).to_vec());
    }
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let (metric, value) = if system.translates() {
        ("bleu", bleu4(&hyps, &refs))
    } else {
        ("wer", corpus_wer(&hyps, &refs))
    };
    Ok(EvalRecord {
        system: system.name().to_string(),
        split: split.to_string(),
        beam,
        metric,
        value,
        n: examples.len(),
        mean_decode_ms: elapsed / examples.len().max(1) as f64,
    })
}

pub fn evaluate(system: &System<'_>, data: &Dataset, split: &str, beam: usize) -> Result<EvalRecord> {
    let examples: Vec<&Example> = data.split(split)?.iter().collect();
    evaluate_examples(system, split, &examples, beam, decode_limit(&data.spec))
}

/// Greedy dev metric and its selection score (higher is better): BLEU for
/// translating models, negative WER for ASR.
pub(crate) fn dev_score(model: &AnyModel, dev: &[&Example], max_len: usize) -> Result<(&'static str, f64, f64)> {
    let r = evaluate_examples(&System::Model(model), "dev", dev, 1, max_len)?;
    let score = if r.metric == "wer" { -r.value } else { r.value };
    Ok((r.metric, r.value, score))
}
