use rand::Rng;

use crate::error::Result;
use crate::nn::{AdaptorKind, Linear, ModelConfig, ParamStore};
use crate::numerics::{Tape, Var};

/// Bridge from acoustic states to the textual encoder's input space:
/// `λ·ReLU(W^map·h + b^map) + (1−λ)·P̃·W^e`, where `P̃` is the CTC
/// posterior with the blank column dropped and rows renormalized.
#[derive(Debug, Clone)]
pub struct Adaptor {
    kind: AdaptorKind,
    lambda: f32,
    map: Option<Linear>,
}

impl Adaptor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &ModelConfig) -> Self {
        let map = matches!(cfg.adaptor, AdaptorKind::Mapping | AdaptorKind::Fusion)
            .then(|| Linear::new(store, rng, &format!("{name}.map"), cfg.d_model, cfg.d_model));
        let lambda = match cfg.adaptor {
            AdaptorKind::None | AdaptorKind::Mapping => 1.0,
            AdaptorKind::Soft => 0.0,
            AdaptorKind::Fusion => cfg.lambda,
        };
        Adaptor {
            kind: cfg.adaptor,
            lambda,
            map,
        }
    }

    pub fn kind(&self) -> AdaptorKind {
        self.kind
    }

    /// Weight on the mapped branch.
    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    /// `h: [T×d]` acoustic states, `posteriors: [T×C]` CTC distribution,
    /// `table: [(C−1)×d]` shared embedding.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, posteriors: Var, table: Var) -> Result<Var> {
        if self.kind == AdaptorKind::None {
            return Ok(h);
        }
        let map = match (&self.map, self.lambda > 0.0) {
            (Some(m), true) => Some(mapped(tape, store, m, h)?),
            _ => None,
        };
        let soft = if self.lambda < 1.0 {
            Some(soft_embedding(tape, posteriors, table)?)
        } else {
            None
        };
        match (map, soft) {
            (Some(m), Some(s)) => fuse(tape, m, s, self.lambda),
            (Some(m), None) => Ok(m),
            (None, Some(s)) => Ok(s),
            (None, None) => unreachable!("lambda selects at least one branch"),
        }
    }
}

/// Expected embedding under the blank-free posterior.
pub fn soft_embedding(tape: &mut Tape, posteriors: Var, table: Var) -> Result<Var> {
    let q = tape.renorm_non_blank(posteriors)?;
    tape.matmul(q, table)
}

pub fn mapped(tape: &mut Tape, store: &ParamStore, map: &Linear, h: Var) -> Result<Var> {
    let z = map.forward(tape, store, h)?;
    tape.relu(z)
}

/// `λ·map + (1−λ)·soft`.
pub fn fuse(tape: &mut Tape, map: Var, soft: Var, lambda: f32) -> Result<Var> {
    tape.weighted_sum(&[(map, lambda as f64), (soft, 1.0 - lambda as f64)])
}
