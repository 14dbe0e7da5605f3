//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-input relative error, see [`relative_error`].
    pub max_rel_error: f64,
    /// Largest elementwise absolute difference.
    pub max_abs_error: f64,
    /// Input whose relative error peaked.
    pub worst_input: usize,
    pub checked: usize,
    /// Coordinates left out because `x ± h` flips the sign of some ReLU
    /// input, where a central difference measures the kink, not the slope.
    pub kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Denominator floor of [`relative_error`]: tensors whose gradients are
/// this small are compared in absolute terms.
pub const NORM_FLOOR: f64 = 0.1;

/// `‖a − n‖₂ / max(‖a‖₂ + ‖n‖₂, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(NORM_FLOOR)
}

/// Checks the gradient of the scalar `f` at `point` with step `h`.
///
/// `f` is rebuilt on a fresh [`Tape::precise`] evaluation tape for every
/// probe, so it must be deterministic. Without `f32` rounding between ops the
/// differences resolve gradients of whole models, not just single ops.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| tape.var(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::precise();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.scalar_f64(out), tape.relu_pattern()))
    };
    let (_, pattern) = eval(point)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_input: 0,
        checked: 0,
        kinks: 0,
        tolerance: tol,
    };
    let mut probe: Vec<Tensor> = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        let mut kept = Vec::with_capacity(t.len());
        let mut numeric = Vec::with_capacity(t.len());
        for e in 0..t.len() {
            let x = t.data()[e];
            let plus = x + h as f32;
            let minus = x - h as f32;
            probe[ti].data_mut()[e] = plus;
            let (fp, pp) = eval(&probe)?;
            probe[ti].data_mut()[e] = minus;
            let (fm, pm) = eval(&probe)?;
            probe[ti].data_mut()[e] = x;
            if pp != pattern || pm != pattern {
                report.kinks += 1;
                continue;
            }
            let n = (fp - fm) / (plus as f64 - minus as f64);
            report.max_abs_error = report.max_abs_error.max((analytic[ti][e] - n).abs());
            kept.push(analytic[ti][e]);
            numeric.push(n);
        }
        let rel = relative_error(&kept, &numeric);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_input = ti;
        }
        report.checked += numeric.len();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencils_across_a_relu_kink_are_skipped() {
        let x = Tensor::new(vec![3], vec![5e-4, 0.5, -0.7]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &[x],
            1e-3,
            1e-3,
        )
        .unwrap();
        assert_eq!((r.kinks, r.checked), (1, 2));
        assert!(r.passed());
    }

    #[test]
    fn smooth_graphs_skip_nothing() {
        let x = Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let r = grad_check(|t, v| t.smoothed_ce(v[0], &[0, 1], 0.1), &[x], 1e-3, 1e-3).unwrap();
        assert_eq!((r.kinks, r.checked), (0, 4));
        assert!(r.passed());
    }
}
