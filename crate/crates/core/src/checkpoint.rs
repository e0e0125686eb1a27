//! Checkpoint save/load on top of the binary container.
//!
//! A checkpoint stores the architecture config, every named weight, the
//! batch-norm running statistics, optional optimizer moments, the epoch, and
//! the run seed. Loading validates weight names and shapes against a fresh
//! build of the stored config.

use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{FormatError, ModelError};
use crate::ops::BnStats;
use crate::tensor::{Scalar, Tensor};
use crate::train::{AdamW, AdamWHyper};
use crate::unet::{Model, UNetConfig};

#[derive(Debug)]
pub struct Checkpoint<T: Scalar> {
    pub config: UNetConfig,
    pub epoch: usize,
    pub rng_seed: u64,
    pub weights: Vec<(String, Tensor<T>)>,
    pub bn_stats: Vec<(String, BnStats<T>)>,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(
        model: &Model<T>,
        epoch: usize,
        rng_seed: u64,
        optimizer: Option<AdamW<T>>,
    ) -> Self {
        Checkpoint {
            config: model.config().clone(),
            epoch,
            rng_seed,
            weights: model.params().to_vec(),
            bn_stats: model.bn_stats().to_vec(),
            optimizer,
        }
    }

    /// Rebuild a model with these exact weights and running statistics.
    pub fn to_model(&self) -> Result<Model<T>, ModelError> {
        let mut rng = crate::rng::Rng::from_seed(self.rng_seed);
        let mut model = Model::build(self.config.clone(), &mut rng)?;
        for (name, t) in &self.weights {
            model.set_param(name, t.clone())?;
        }
        for (name, s) in &self.bn_stats {
            model.set_bn_stats(name, s.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let mut meta = json!({
            "kind": "checkpoint",
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "epoch": self.epoch,
            "rng_seed": self.rng_seed,
        });
        if let Some(opt) = &self.optimizer {
            meta["optimizer"] = json!({
                "step": opt.step,
                "beta1": opt.hyper.beta1,
                "beta2": opt.hyper.beta2,
                "eps": opt.hyper.eps,
                "weight_decay": opt.hyper.weight_decay,
            });
        }
        let mut c = Container::new(meta);
        for (name, t) in &self.weights {
            c.put_tensor(&format!("weights/{name}"), t);
        }
        for (name, s) in &self.bn_stats {
            c.put_tensor(
                &format!("stats/{name}.mean"),
                &Tensor::from_vec(vec![s.mean.len()], s.mean.clone()).expect("shape"),
            );
            c.put_tensor(
                &format!("stats/{name}.var"),
                &Tensor::from_vec(vec![s.var.len()], s.var.clone()).expect("shape"),
            );
        }
        if let Some(opt) = &self.optimizer {
            for (name, m, v) in &opt.moments {
                c.put_tensor(&format!("optimizer/m/{name}"), m);
                c.put_tensor(&format!("optimizer/v/{name}"), v);
            }
        }
        c.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint<T>, ModelError> {
        let c = Container::read_from(path)?;
        let config: UNetConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| FormatError::Header(format!("config: {e}")))?;
        config.validate()?;
        let epoch = c.meta["epoch"].as_u64().unwrap_or(0) as usize;
        let rng_seed = c.meta["rng_seed"].as_u64().unwrap_or(0);

        // weight names and shapes must exactly match a fresh build(config)
        let specs = config.parameter_specs();
        let mut weights = Vec::with_capacity(specs.len());
        for (name, shape) in &specs {
            let key = format!("weights/{name}");
            if !c.contains(&key) {
                return Err(FormatError::MissingEntry { name: key }.into());
            }
            let t: Tensor<T> = c.tensor(&key)?;
            if t.shape() != &shape[..] {
                return Err(ModelError::WeightShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            weights.push((name.clone(), t));
        }
        let stored_weights = c.names().filter(|n| n.starts_with("weights/")).count();
        if stored_weights != specs.len() {
            return Err(ModelError::InvalidConfig(format!(
                "checkpoint stores {stored_weights} weights, config defines {}",
                specs.len()
            )));
        }

        let mut bn_stats = Vec::new();
        for (name, channels) in config.bn_layer_specs() {
            let mean: Tensor<T> = c.tensor(&format!("stats/{name}.mean"))?;
            let var: Tensor<T> = c.tensor(&format!("stats/{name}.var"))?;
            if mean.numel() != channels || var.numel() != channels {
                return Err(ModelError::WeightShape {
                    name: format!("stats/{name}"),
                    expected: vec![channels],
                    found: mean.shape().to_vec(),
                });
            }
            bn_stats.push((
                name,
                BnStats {
                    mean: mean.data().to_vec(),
                    var: var.data().to_vec(),
                },
            ));
        }

        let optimizer = if c.meta.get("optimizer").is_some_and(|o| !o.is_null()) {
            let o = &c.meta["optimizer"];
            let hyper = AdamWHyper {
                beta1: o["beta1"].as_f64().unwrap_or(0.9),
                beta2: o["beta2"].as_f64().unwrap_or(0.999),
                eps: o["eps"].as_f64().unwrap_or(1e-8),
                weight_decay: o["weight_decay"].as_f64().unwrap_or(1e-2),
            };
            let mut opt = AdamW::new(hyper, &specs);
            opt.step = o["step"].as_u64().unwrap_or(0) as usize;
            for (name, m, v) in opt.moments.iter_mut() {
                *m = c.tensor(&format!("optimizer/m/{name}"))?;
                *v = c.tensor(&format!("optimizer/v/{name}"))?;
            }
            Some(opt)
        } else {
            None
        };

        Ok(Checkpoint {
            config,
            epoch,
            rng_seed,
            weights,
            bn_stats,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::Tape;

    fn forward_once(model: &Model<f32>) -> Vec<f32> {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_fn(vec![1, 1, 8, 8, 8], |i| ((i * 31 % 97) as f32) * 0.01),
            false,
        );
        let trace = model.forward_eval(&mut tape, x).unwrap();
        tape.value(trace.logits).data().to_vec()
    }

    #[test]
    fn save_load_forward_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::from_seed(9);
        let model: Model<f32> = Model::build(UNetConfig::tiny(), &mut rng).unwrap();
        let before = forward_once(&model);

        Checkpoint::from_model(&model, 7, 9, None)
            .save(&path)
            .unwrap();
        let loaded: Checkpoint<f32> = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        let after = forward_once(&loaded.to_model().unwrap());
        assert_eq!(before, after);
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::from_seed(10);
        let model: Model<f32> = Model::build(UNetConfig::tiny(), &mut rng).unwrap();
        let specs = model.config().parameter_specs();
        let mut opt = AdamW::<f32>::new(AdamWHyper::default(), &specs);
        opt.step = 42;
        Checkpoint::from_model(&model, 1, 10, Some(opt))
            .save(&path)
            .unwrap();
        let loaded: Checkpoint<f32> = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.optimizer.as_ref().unwrap().step, 42);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::from_seed(11);
        let model: Model<f32> = Model::build(UNetConfig::tiny(), &mut rng).unwrap();
        Checkpoint::from_model(&model, 0, 11, None)
            .save(&path)
            .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'!';
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn shape_mismatch_names_the_weight() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = Rng::from_seed(12);
        let model: Model<f32> = Model::build(UNetConfig::tiny(), &mut rng).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, 0, 12, None);
        // corrupt one weight's shape, keeping the element count
        let idx = ckpt
            .weights
            .iter()
            .position(|(n, _)| n == "head.bias")
            .unwrap();
        ckpt.weights[idx].1 = ckpt.weights[idx].1.reshape(vec![3, 1]).unwrap();
        ckpt.save(&path).unwrap();
        let err = Checkpoint::<f32>::load(&path).unwrap_err();
        assert!(err.to_string().contains("head.bias"), "got: {err}");
    }
}
