//! AdamW: Adam with decoupled weight decay.

use crate::error::TrainError;
use crate::tensor::{Scalar, Tensor};
use crate::unet::Model;

#[derive(Debug, Clone, Copy)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Optimizer state: per-parameter first/second moments and the step count,
/// aligned by name with the model parameters.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub hyper: AdamWHyper,
    pub step: usize,
    pub moments: Vec<(String, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hyper: AdamWHyper, param_specs: &[(String, Vec<usize>)]) -> Self {
        let moments = param_specs
            .iter()
            .map(|(name, shape)| {
                (
                    name.clone(),
                    Tensor::zeros(shape.clone()),
                    Tensor::zeros(shape.clone()),
                )
            })
            .collect();
        AdamW {
            hyper,
            step: 0,
            moments,
        }
    }

    /// One update over every parameter:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected, then
    /// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd * theta)` with
    /// the decay term decoupled from the gradient.
    ///
    /// `grads` must align with the model's parameter order. A non-finite
    /// gradient aborts before any state is touched.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<(), TrainError> {
        assert_eq!(grads.len(), self.moments.len(), "gradient list misaligned");
        for ((name, _, _), g) in self.moments.iter().zip(grads) {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient {
                    name: name.clone(),
                    step: self.step,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let b1 = T::from_f64(h.beta1);
        let b2 = T::from_f64(h.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - h.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - h.beta2.powi(t));
        let eps = T::from_f64(h.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(h.weight_decay);

        for ((name, m, v), g) in self.moments.iter_mut().zip(grads) {
            let theta = model
                .param(name)
                .unwrap_or_else(|| panic!("optimizer tracks unknown parameter `{name}`"))
                .clone();
            let gd = g.data();
            let mut m_new = Vec::with_capacity(gd.len());
            let mut v_new = Vec::with_capacity(gd.len());
            let mut theta_new = Vec::with_capacity(gd.len());
            for i in 0..gd.len() {
                let gi = gd[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let ti = theta.data()[i];
                theta_new.push(ti - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * ti));
                m_new.push(mi);
                v_new.push(vi);
            }
            *m = Tensor::from_vec(m.shape().to_vec(), m_new).expect("shape");
            *v = Tensor::from_vec(v.shape().to_vec(), v_new).expect("shape");
            let updated = Tensor::from_vec(theta.shape().to_vec(), theta_new).expect("shape");
            model.set_param(name, updated).expect("parameter exists");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::unet::UNetConfig;

    fn scalar_model(theta: f64) -> (Model<f64>, Vec<(String, Vec<usize>)>) {
        // smallest real model; we poke a single named parameter for the
        // hand-arithmetic cases
        let mut rng = Rng::from_seed(0);
        let mut model: Model<f64> = Model::build(UNetConfig::tiny(), &mut rng).unwrap();
        model
            .set_param("head.bias", Tensor::full(vec![3], theta))
            .unwrap();
        let specs = model.config().parameter_specs();
        (model, specs)
    }

    fn zero_grads(specs: &[(String, Vec<usize>)]) -> Vec<Tensor<f64>> {
        specs
            .iter()
            .map(|(_, s)| Tensor::zeros(s.clone()))
            .collect()
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let (mut model, specs) = scalar_model(2.0);
        let mut opt = AdamW::new(AdamWHyper::default(), &specs);
        let grads = zero_grads(&specs);
        let before = model.param("head.bias").unwrap().clone();
        opt.step(&mut model, &grads, 0.1).unwrap();
        let after = model.param("head.bias").unwrap();
        for (b, a) in before.data().iter().zip(after.data()) {
            // theta' = theta - lr * wd * theta
            let expected = b - 0.1 * 0.01 * b;
            assert!((a - expected).abs() < 1e-15, "{a} vs {expected}");
        }
    }

    #[test]
    fn single_step_hand_arithmetic() {
        // theta=1, g=1, lr=0.1, wd=0:
        // m=0.1, v=0.001, m_hat=1, v_hat=1, theta' = 1 - 0.1/(1 + 1e-8)
        let (mut model, specs) = scalar_model(1.0);
        let hyper = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(hyper, &specs);
        let grads: Vec<Tensor<f64>> = specs
            .iter()
            .map(|(n, s)| {
                if n == "head.bias" {
                    Tensor::ones(s.clone())
                } else {
                    Tensor::zeros(s.clone())
                }
            })
            .collect();
        opt.step(&mut model, &grads, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        for &v in model.param("head.bias").unwrap().data() {
            assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let (mut model, specs) = scalar_model(1.0);
        let mut opt = AdamW::new(AdamWHyper::default(), &specs);
        let mut grads = zero_grads(&specs);
        let idx = specs.iter().position(|(n, _)| n == "head.bias").unwrap();
        grads[idx] = Tensor::full(vec![3], f64::NAN);
        let before = model.param("head.bias").unwrap().clone();
        let err = opt.step(&mut model, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("head.bias"));
        assert_eq!(opt.step, 0);
        assert_eq!(model.param("head.bias").unwrap().data(), before.data());
    }

    #[test]
    fn identical_runs_bitwise_identical() {
        let run = || {
            let (mut model, specs) = scalar_model(1.0);
            let mut opt = AdamW::new(AdamWHyper::default(), &specs);
            let rng = Rng::from_seed(5);
            for _ in 0..5 {
                let grads: Vec<Tensor<f64>> = specs
                    .iter()
                    .map(|(_, s)| {
                        let mut r = rng.derive(&[s.len() as u64]);
                        Tensor::from_fn(s.clone(), |_| r.uniform_in(-1.0, 1.0))
                    })
                    .collect();
                opt.step(&mut model, &grads, 1e-3).unwrap();
            }
            model.param("enc0.conv.weight").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
