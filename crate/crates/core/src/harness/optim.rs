use crate::error::{Result, SateError};
use crate::nn::ParamStore;

/// Warmup then inverse-square-root decay: `peak·min(s/warmup, sqrt(warmup/s))`
/// at 1-based step `s`.
pub fn lr_at(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in `f64`, one buffer per
/// parameter in store order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, params: AdamParams) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            params,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients in `store` and clears them.
    /// Parameters without a gradient still decay their moments.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(SateError::Contract(format!(
                "optimizer built for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let g = p.take_grad();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.as_ref().map_or(0.0, |g| g[k] as f64);
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn schedule_closed_form() {
        let (peak, w) = (1e-3, 400);
        for s in [1usize, 7, 200, 399, 400, 401, 1600, 10_000] {
            let expect = if s <= w {
                peak * s as f64 / w as f64
            } else {
                peak * (w as f64 / s as f64).sqrt()
            };
            assert!((lr_at(s, peak, w) - expect).abs() <= 1e-9);
        }
        assert_eq!(lr_at(400, peak, w), peak);
        assert!((lr_at(1600, peak, w) - peak / 2.0).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, AdamParams::default());
        store.get_mut(id).accumulate_grad(&[0.5, -2.0]);
        adam.step(&mut store, 0.1).unwrap();
        let w = store.get(id).data();
        // Bias-corrected first step is lr·sign(g).
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![3], vec![3.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(&store, AdamParams::default());
        for _ in 0..2000 {
            let g: Vec<f32> = store.get(id).data().iter().map(|x| 2.0 * x).collect();
            store.get_mut(id).accumulate_grad(&g);
            adam.step(&mut store, 0.01).unwrap();
        }
        assert!(store.get(id).data().iter().all(|x| x.abs() < 1e-2));
    }
}
