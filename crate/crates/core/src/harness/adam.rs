//! Bias-corrected Adam over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates and step count per parameter. Parameters that receive no
/// gradient in a step (for example while frozen) keep their state untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, m: zeros.clone(), v: zeros, steps: vec![0; store.len()] }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps[id.index()]
    }

    /// Applies one update. Every gradient is checked before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::Data(format!(
                    "gradient of `{}` has shape {:?}, parameter has {:?}",
                    store.name(*id),
                    g.shape(),
                    store.get(*id).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads {
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(*id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Alignment, Tensor::from_vec(vec![0.5, -1.0, 2.0]));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store();
        let mut adam = Adam::new(&s, AdamConfig::default());
        let g = Tensor::from_vec(vec![3.0, -0.25, 1e-3]);
        adam.step(&mut s, &[(id, g.clone())], 0.01).unwrap();
        // m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps).
        let start = [0.5, -1.0, 2.0];
        for k in 0..3 {
            let gk = g.data()[k];
            let want = start[k] - 0.01 * gk / (gk.abs() + 1e-8);
            assert!((s.get(id).data()[k] - want).abs() < 1e-15);
            assert!(((start[k] - s.get(id).data()[k]) - 0.01 * gk.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_never_moves() {
        let (mut s, id) = store();
        let mut adam = Adam::new(&s, AdamConfig::default());
        for _ in 0..50 {
            adam.step(&mut s, &[(id, Tensor::zeros(&[3]))], 0.1).unwrap();
        }
        assert_eq!(s.get(id).data(), [0.5, -1.0, 2.0]);
    }

    #[test]
    fn trajectories_are_bit_identical() {
        let run = || {
            let (mut s, id) = store();
            let mut adam = Adam::new(&s, AdamConfig::default());
            let mut traj = Vec::new();
            for k in 0..10 {
                let p = s.get(id).clone();
                let g = Tensor::from_vec(p.data().iter().map(|x| x * x - 0.1 * k as f64).collect());
                adam.step(&mut s, &[(id, g)], 1e-2).unwrap();
                traj.extend(s.get(id).data().iter().map(|x| x.to_bits()));
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
        let (mut s, id) = store();
        let mut adam = Adam::new(&s, AdamConfig::default());
        let e = adam.step(&mut s, &[(id, Tensor::from_vec(vec![1.0, f64::NAN, 0.0]))], 0.1).unwrap_err();
        assert!(matches!(&e, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(s.get(id).data(), [0.5, -1.0, 2.0]);
        assert_eq!(adam.steps(id), 0);
    }
}
