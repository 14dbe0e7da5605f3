//! CTC loss, greedy decoding, and an exhaustive path-enumeration oracle.
//!
//! Blank is class 0; real tokens are `1..C`.

use rand::Rng;

use crate::error::{Result, SateError};
use crate::nn::{LayerNorm, Linear, ParamStore};
use crate::numerics::kernels::log_add;
use crate::numerics::{Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// Largest number of paths [`brute_force_ctc`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Fewest frames that admit an alignment of `labels`.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(labels: &[usize], frames: usize) -> bool {
    frames >= min_frames(labels).max(1)
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// CTC negative log-likelihood recorded on `tape`. `None` when the
/// labeling is infeasible for the number of frames.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Option<Var>> {
    tape.ctc_nll(log_probs, labels)
}

/// Loss value only, computed on a scratch tape.
pub fn ctc_loss_value(log_probs: &Tensor, labels: &[usize]) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let lp = tape.constant(log_probs.clone());
    Ok(tape.ctc_nll(lp, labels)?.map(|v| tape.scalar_f64(v)))
}

/// `−log Σ_π Π_t p(π_t)` by enumerating every length-`T` path.
/// `None` when no path collapses to `labels`.
pub fn brute_force_ctc(log_probs: &Tensor, labels: &[usize]) -> Result<Option<f64>> {
    let (t_len, classes) = log_probs.dims2();
    let n_paths = (classes as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if n_paths > BRUTE_FORCE_LIMIT {
        return Err(SateError::TooLarge(n_paths));
    }
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    for mut code in 0..n_paths {
        for p in path.iter_mut() {
            *p = (code % classes as u128) as usize;
            code /= classes as u128;
        }
        if collapse(&path) == labels {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| log_probs.at2(t, c) as f64)
                .sum();
            total = log_add(total, lp);
        }
    }
    Ok((total > f64::NEG_INFINITY).then_some(-total))
}

/// Per-frame argmax, collapsed.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| log_probs.argmax_row(t)).collect();
    collapse(&path)
}

/// Layer norm followed by a projection onto `{blank} ∪ V`.
#[derive(Debug, Clone)]
pub struct CtcHead {
    ln: LayerNorm,
    proj: Linear,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, classes: usize) -> Self {
        CtcHead {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            proj: Linear::new(store, rng, &format!("{name}.proj"), d, classes),
        }
    }

    /// Unnormalized per-frame scores `[T×C]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let z = self.ln.forward(tape, store, h)?;
        self.proj.forward(tape, store, z)
    }

    /// Per-frame log distributions `[T×C]`.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let z = self.logits(tape, store, h)?;
        tape.log_softmax(z, 1)
    }
}

/// Row-stochastic CTC posteriors `[T×C]` from encoder states.
pub fn ctc_posteriors(tape: &mut Tape, store: &ParamStore, head: &CtcHead, h: Var) -> Result<Var> {
    let z = head.logits(tape, store, h)?;
    tape.softmax(z, 1)
}
