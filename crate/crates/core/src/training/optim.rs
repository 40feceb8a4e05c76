//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<E = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(config: AdamWConfig, params: &ParamStore<E>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores optimiser state saved alongside a checkpoint.
    pub fn from_state(
        config: AdamWConfig,
        step: u64,
        m: Vec<Tensor<E>>,
        v: Vec<Tensor<E>>,
    ) -> Self {
        Self { config, step, m, v }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<E>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<E>] {
        &self.v
    }

    /// One update: `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &[Tensor<E>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() || self.m[id.index()].shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    params.name(id),
                    g.shape(),
                    params.get(id).shape()
                )));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = E::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = E::from_f64(1.0 - c.beta2.powi(t));
        let (b1, b2) = (E::from_f64(c.beta1), E::from_f64(c.beta2));
        let (one_b1, one_b2) = (E::from_f64(1.0 - c.beta1), E::from_f64(1.0 - c.beta2));
        let eps = E::from_f64(c.eps);
        let lr_e = E::from_f64(lr);
        let decay = E::ONE - E::from_f64(lr * c.weight_decay);

        for (id, g) in params.ids().zip(grads) {
            let i = id.index();
            let theta = params.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..theta.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] = theta[j] * decay - lr_e * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(theta));
        s
    }

    #[test]
    fn zero_gradient_applies_decay_only() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.01,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        let got = p.iter().next().unwrap().1.item().unwrap();
        assert!((got - 0.999).abs() < 1e-15);
        assert_eq!(opt.first_moments()[0].item().unwrap(), 0.0);
        assert_eq!(opt.second_moments()[0].item().unwrap(), 0.0);
    }

    #[test]
    fn no_decay_matches_reference_adam() {
        // minimise (θ - 3)² from θ = 0
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = single(0.0);
        let mut opt = AdamW::new(cfg, &p);

        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let lr = 0.05;
        for t in 1..=5 {
            let g = 2.0 * (theta - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mhat / (vhat.sqrt() + 1e-8);

            let cur = p.iter().next().unwrap().1.item().unwrap();
            opt.step(&mut p, &[Tensor::scalar(2.0 * (cur - 3.0))], lr)
                .unwrap();
            let got = p.iter().next().unwrap().1.item().unwrap();
            assert!((got - theta).abs() < 1e-7, "step {t}: {got} vs {theta}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(matches!(
            opt.step(&mut p, &[Tensor::zeros(&[2])], 0.1),
            Err(Error::Dimension(_))
        ));
        assert!(opt.step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = ParamStore::<f32>::new();
            s.add("w", Tensor::from_fn(&[3, 4], |i| (i as f32 * 0.3).sin()));
            let mut opt = AdamW::new(AdamWConfig::default(), &s);
            for step in 0..10 {
                let g = s
                    .iter()
                    .next()
                    .unwrap()
                    .1
                    .map(|x| x * x - 0.1 * step as f32);
                opt.step(&mut s, &[g], 1e-2).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
