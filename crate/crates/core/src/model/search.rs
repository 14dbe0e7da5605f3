//! Greedy and beam decoding over an abstract next-token distribution.

use crate::error::{Result, SateError};
use crate::numerics::argmax;

/// Decoder output id that ends a sequence.
pub const EOS: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of next-token log-probabilities, including the final EOS.
    pub log_prob: f64,
    /// Set when `max_len` ran out before EOS.
    pub truncated: bool,
}

impl Hypothesis {
    /// Log-probability per emitted symbol (EOS counts).
    pub fn score(&self) -> f64 {
        let len = self.tokens.len() + usize::from(!self.truncated);
        self.log_prob / len.max(1) as f64
    }
}

/// `step(prefix)` returns log-probabilities over `{EOS} ∪ tokens`.
pub type StepFn<'a> = dyn FnMut(&[usize]) -> Result<Vec<f32>> + 'a;

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(SateError::Contract("max_len must be at least 1".into()));
    }
    Ok(())
}

pub fn greedy_search(step: &mut StepFn<'_>, max_len: usize) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0f64;
    for _ in 0..max_len {
        let dist = step(&tokens)?;
        let k = argmax(&dist);
        log_prob += dist[k] as f64;
        if k == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                truncated: false,
            });
        }
        tokens.push(k);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        truncated: true,
    })
}

/// Indices of the `k` largest entries, ties broken by lower index.
fn top_k(dist: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]));
    idx.truncate(k);
    idx
}

/// Beam search ranked by summed log-probability during expansion and by
/// [`Hypothesis::score`] when picking the final answer. `beam = 1` is
/// greedy decoding.
pub fn beam_search(step: &mut StepFn<'_>, beam: usize, max_len: usize) -> Result<Hypothesis> {
    check_max_len(max_len)?;
    if beam == 0 {
        return Err(SateError::Contract("beam size must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (bi, (prefix, lp)) in live.iter().enumerate() {
            let dist = step(prefix)?;
            for k in top_k(&dist, beam) {
                cands.push((bi, k, lp + dist[k] as f64));
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next = Vec::new();
        for &(bi, k, lp) in cands.iter().take(beam) {
            let tokens = live[bi].0.clone();
            if k == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    truncated: false,
                });
            } else {
                let mut t = tokens;
                t.push(k);
                next.push((t, lp));
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() {
        live.into_iter()
            .map(|(tokens, log_prob)| Hypothesis {
                tokens,
                log_prob,
                truncated: true,
            })
            .collect()
    } else {
        finished
    };
    let mut best: Option<Hypothesis> = None;
    for h in pool {
        if best.as_ref().map_or(true, |b| h.score() > b.score()) {
            best = Some(h);
        }
    }
    Ok(best.expect("at least one hypothesis"))
}
