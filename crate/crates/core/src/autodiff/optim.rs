use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-tensor step counters, so parameter groups updated on
/// different schedules each get their own bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    steps: Vec<u64>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![F::zero(); store.get(id).data.len()])
                .collect::<Vec<_>>()
        };
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Updates the listed parameters in place.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &Gradients<F>,
        ids: &[ParamId],
    ) -> Result<()> {
        if grads.grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer state for {} tensors, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.grads.len()
            )));
        }
        let (b1, b2) = (F::lit(self.cfg.beta1), F::lit(self.cfg.beta2));
        let (lr, eps) = (F::lit(self.cfg.lr), F::lit(self.cfg.eps));
        for &id in ids {
            let k = id.index();
            let g = &grads.grads[k];
            let p = &mut store.get_mut(id).data;
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient length mismatch for tensor {k}")));
            }
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = F::one() - b1.powi(t);
            let c2 = F::one() - b2.powi(t);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Tensor;
    use crate::autodiff::tape::Tape;

    #[test]
    fn zero_gradient_is_noop() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", Tensor { rows: 2, cols: 1, data: vec![0.3, -0.7] });
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let g = Gradients::zeros_like(&ps);
        for _ in 0..5 {
            adam.step(&mut ps, &g, &[id]).unwrap();
        }
        assert_eq!(ps.get(id).data, vec![0.3, -0.7]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // (x - 1.5)^2 from x = 0 at lr = 1e-2.
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", Tensor { rows: 1, cols: 1, data: vec![0.0] });
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, &ps);
        let mut converged_at = None;
        for it in 0..500 {
            let grads = {
                let mut t = Tape::new(&ps);
                let x = t.param(id);
                let d = t.offset(x, &[-1.5]);
                let sq = t.mul(d, d);
                t.backward(sq).unwrap().params
            };
            adam.step(&mut ps, &grads, &[id]).unwrap();
            if converged_at.is_none() && (ps.get(id).data[0] - 1.5).abs() < 1e-3 {
                converged_at = Some(it);
            }
        }
        assert!(converged_at.is_some());
        assert!((ps.get(id).data[0] - 1.5).abs() < 1e-3, "{}", ps.get(id).data[0]);
    }

    #[test]
    fn deterministic_steps() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", Tensor { rows: 1, cols: 1, data: vec![0.2] });
        let mut g = Gradients::zeros_like(&ps);
        g.grads[0][0] = 0.37;
        let mut a1 = Adam::new(AdamConfig::default(), &ps);
        let mut a2 = a1.clone();
        let (mut p1, mut p2) = (ps.clone(), ps.clone());
        a1.step(&mut p1, &g, &[id]).unwrap();
        a2.step(&mut p2, &g, &[id]).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ps = ParamStore::<f64>::new();
        ps.add("x", Tensor { rows: 1, cols: 1, data: vec![0.2] });
        let g = Gradients::zeros_like(&ps);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        ps.add("y", Tensor { rows: 1, cols: 1, data: vec![0.2] });
        assert!(adam.step(&mut ps, &g, &[]).is_err());
    }
}
